"""Typed errors shared across the engine, with stable CLI exit codes."""


class AgnesError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ShapeMismatch(AgnesError):
    exit_code = 4

    def __init__(self, layer, expected, got):
        super().__init__(f"layer {layer!r}: expected shape {expected}, got {got}")
        self.layer = layer
        self.expected = expected
        self.got = got


class IndexOutOfRange(AgnesError):
    exit_code = 5


class EmptyDataset(AgnesError):
    exit_code = 6


class UnsupportedLayer(AgnesError):
    exit_code = 7

    def __init__(self, kind, layer=None):
        where = f" (layer {layer!r})" if layer else ""
        super().__init__(f"unsupported layer kind {kind!r}{where}")
        self.kind = kind
        self.layer = layer


class ParseError(AgnesError):
    exit_code = 8


class VersionMismatch(AgnesError):
    exit_code = 9


class BlobOverrun(AgnesError):
    exit_code = 10


class LabelOutOfRange(AgnesError):
    exit_code = 11


class IoError(AgnesError):
    exit_code = 12


class DegenerateInput(AgnesError):
    exit_code = 13


class InvalidConfig(AgnesError):
    exit_code = 14


class BudgetUnsatisfiable(AgnesError):
    exit_code = 15


# Exit-code map is part of the CLI contract; tested for bijectivity.
EXIT_CODES = {
    "AgnesError": 1,
    "ShapeMismatch": 4,
    "IndexOutOfRange": 5,
    "EmptyDataset": 6,
    "UnsupportedLayer": 7,
    "ParseError": 8,
    "VersionMismatch": 9,
    "BlobOverrun": 10,
    "LabelOutOfRange": 11,
    "IoError": 12,
    "DegenerateInput": 13,
    "InvalidConfig": 14,
    "BudgetUnsatisfiable": 15,
}
