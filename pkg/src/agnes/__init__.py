"""Backdoor detection for feedforward/convolutional image classifiers."""

__version__ = "0.1.0"
