import numpy as np
import pytest

from agnes.errors import EmptyDataset
from agnes.nn import Flatten, FullyConnected, Network, NeuronAddress, ReLU
from agnes.stimulation import CNCRecord
from agnes.trigger import (
    OptimizerConfig,
    Trigger,
    TriggerResult,
    apply_trigger,
    compute_asr,
    count_backdoors,
    evaluate_trigger,
    objective_terms,
    reverse_engineer,
)
from oracles import central_differences


def test_apply_trigger_identity_and_full():
    rng = np.random.RandomState(3)
    img = rng.rand(4, 4, 3).astype(np.float32)
    pattern = rng.rand(4, 4, 3).astype(np.float32)
    zero = np.zeros((4, 4), np.float32)
    one = np.ones((4, 4), np.float32)
    assert np.array_equal(apply_trigger(img, zero, pattern), img)
    assert np.array_equal(apply_trigger(img, one, pattern), pattern)


def test_apply_trigger_blend():
    img = np.full((2, 2, 1), 0.5, np.float32)
    pattern = np.ones((2, 2, 1), np.float32)
    mask = np.full((2, 2), 0.4, np.float32)
    out = apply_trigger(img, mask, pattern)
    assert np.allclose(out, 0.6 * 0.5 + 0.4 * 1.0, atol=1e-7)


def test_apply_trigger_idempotent_binary_mask():
    rng = np.random.RandomState(5)
    img = rng.rand(5, 5, 3).astype(np.float32)
    pattern = rng.rand(5, 5, 3).astype(np.float32)
    mask = (rng.rand(5, 5) > 0.5).astype(np.float32)
    once = apply_trigger(img, mask, pattern)
    twice = apply_trigger(once, mask, pattern)
    assert np.array_equal(once, twice)


def single_pixel_net(h=4, w=4):
    """Class 1 logit fires only when pixel (0,0) exceeds 0.9."""
    in_size = h * w
    w1 = np.zeros((1, in_size), np.float32)
    w1[0, 0] = 10.0
    b1 = np.array([-9.0], np.float32)
    w2 = np.array([[0.0], [8.0]], np.float32)
    b2 = np.array([0.5, 0.0], np.float32)
    layers = [Flatten("f"), FullyConnected("h", w1, b1), ReLU("r"),
              FullyConnected("o", w2, b2)]
    return Network((h, w, 1), layers, 2)


def single_pixel_cnc():
    return CNCRecord(address=NeuronAddress(2, 0), value_lo=1.0, value_hi=10.0,
                     induced_label=1, consistency=1.0, positions=(0,))


def test_single_pixel_oracle_and_optimization():
    net = single_pixel_net()
    rng = np.random.RandomState(7)
    images = [(rng.rand(4, 4, 1) * 0.5).astype(np.float32) for _ in range(4)]

    # exhaustive single-pixel oracle: which pixel drives the class-1 logit?
    def logit1_with_pixel(p):
        img = images[0].copy()
        img[np.unravel_index(p, (4, 4))] = 1.0
        from agnes.nn import forward
        return float(forward(net, img).logits[1])

    oracle_best = max(range(16), key=logit1_with_pixel)
    assert oracle_best == 0

    trig = reverse_engineer(net, single_pixel_cnc(), images,
                            OptimizerConfig(iterations=150, seed=1))
    mask = trig.mask
    others = [mask[pos] for pos in zip(*np.unravel_index(range(1, 16), (4, 4)))]
    assert mask[0, 0] > 10 * np.mean(others)


def test_huge_lambda_kills_mask():
    net = single_pixel_net()
    rng = np.random.RandomState(11)
    images = [(rng.rand(4, 4, 1) * 0.5).astype(np.float32) for _ in range(3)]
    cfg = OptimizerConfig(lambda_scale=1e4, iterations=80, seed=2)
    trig = reverse_engineer(net, single_pixel_cnc(), images, cfg)
    assert trig.mask.max() < 0.05
    labels = [0, 0, 0]
    asr = compute_asr(net, trig, images, labels, target_label=1)
    assert asr == 0.0


def test_objective_history_nondecreasing():
    net = single_pixel_net()
    rng = np.random.RandomState(13)
    images = [(rng.rand(4, 4, 1) * 0.5).astype(np.float32) for _ in range(3)]
    trig = reverse_engineer(net, single_pixel_cnc(), images,
                            OptimizerConfig(iterations=60, seed=3))
    hist = trig.objective_history
    assert all(b >= a for a, b in zip(hist, hist[1:]))


def test_mask_gradient_matches_finite_differences():
    net = single_pixel_net(3, 3)
    rng = np.random.RandomState(17)
    images = [(rng.rand(3, 3, 1) * 0.6).astype(np.float32) for _ in range(2)]
    cnc = CNCRecord(address=NeuronAddress(2, 0), value_lo=1.0, value_hi=1.0,
                    induced_label=1, consistency=1.0, positions=(0,))
    cfg = OptimizerConfig()
    mask = (rng.rand(3, 3) * 0.8 + 0.1).astype(np.float32)
    pattern = (rng.rand(3, 3, 1) * 0.8 + 0.1).astype(np.float32)
    _, g_mask, _ = objective_terms(net, images, mask, pattern, cnc, cfg)

    def j(m):
        val, _, _ = objective_terms(net, images, m.astype(np.float32), pattern, cnc, cfg)
        return val

    fd = central_differences(j, mask, h=1e-3)
    rel = np.abs(g_mask - fd) / np.maximum(np.abs(fd), 1e-4)
    assert (rel <= 1e-3).mean() >= 0.9


def stamped_oracle_net():
    """Net that maps any image with a bright (0,0) pixel to class 1, others
    to class 0 via mean intensity."""
    return single_pixel_net()


def test_compute_asr_planted_patch():
    net = stamped_oracle_net()
    rng = np.random.RandomState(19)
    images = [(rng.rand(4, 4, 1) * 0.5).astype(np.float32) for _ in range(6)]
    labels = [0] * 6
    mask = np.zeros((4, 4), np.float32)
    mask[0, 0] = 1.0
    pattern = np.ones((4, 4, 1), np.float32)
    trig = Trigger(mask=mask, pattern=pattern)
    assert compute_asr(net, trig, images, labels, 1) == 1.0
    zero = Trigger(mask=np.zeros((4, 4), np.float32), pattern=pattern)
    assert compute_asr(net, zero, images, labels, 1) == 0.0
    with pytest.raises(EmptyDataset):
        compute_asr(net, trig, [], [], 1)
    with pytest.raises(EmptyDataset):
        compute_asr(net, trig, images, [1] * 6, 1)


def _result(asr, classes, area, label=1, mask=None):
    h = w = 4
    if mask is None:
        mask = np.zeros((h, w), np.float32)
        mask[0, 0] = 1.0
    trig = Trigger(mask=mask, pattern=np.zeros((h, w, 3), np.float32),
                   provenance=CNCRecord(address=NeuronAddress(1, 0), value_lo=0,
                                        value_hi=1, induced_label=label,
                                        consistency=1.0, positions=(0,)))
    return TriggerResult(trigger=trig, target_label=label, asr=asr,
                         classes_misclassified=classes,
                         is_backdoor=classes >= 0.8,
                         mask_area_fraction=area,
                         suspect_global=area > 0.25)


def test_count_backdoors_thresholds():
    assert count_backdoors([]) == 0
    assert count_backdoors([_result(1.0, 0.79, 0.01)]) == 0
    assert count_backdoors([_result(1.0, 0.85, 0.01)]) == 1
    # whole-image repaint flagged suspect-global is never counted
    big = np.ones((4, 4), np.float32)
    assert count_backdoors([_result(1.0, 1.0, 1.0, mask=big)]) == 0


def test_count_backdoors_dedup():
    a = _result(1.0, 0.9, 0.06)
    b = _result(0.9, 0.9, 0.06)  # same mask, same label -> duplicate
    other_mask = np.zeros((4, 4), np.float32)
    other_mask[3, 3] = 1.0
    c = _result(0.8, 0.9, 0.06, mask=other_mask)
    d = _result(0.7, 0.9, 0.06, label=2)  # same mask, different label
    assert count_backdoors([a, b]) == 1
    assert count_backdoors([a, c]) == 2
    assert count_backdoors([a, d]) == 2
    assert count_backdoors([a, b, c, d]) == 3


def test_evaluate_trigger_by_class():
    net = stamped_oracle_net()
    rng = np.random.RandomState(23)
    images = [(rng.rand(4, 4, 1) * 0.5).astype(np.float32) for _ in range(8)]
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    mask = np.zeros((4, 4), np.float32)
    mask[0, 0] = 1.0
    pattern = np.ones((4, 4, 1), np.float32)
    res = evaluate_trigger(net, Trigger(mask=mask, pattern=pattern), images, labels, 1)
    assert res.asr == 1.0
    assert res.classes_misclassified == 1.0  # the single non-target class flips
    assert res.is_backdoor and not res.suspect_global
    assert res.mask_area_fraction == pytest.approx(1 / 16)
