"""Trigger reverse engineering and attack-success-rate evaluation.

For a compromised-neuron candidate we optimize a blended patch: a mask m in
[0,1]^(h,w) shared across channels and a pattern p in [0,1]^(h,w,c), stamped
as img*(1-m) + p*m. Gradient ascent maximizes the candidate neuron's drive
plus the induced class logit, minus an L1 mask penalty. Mask and pattern are
parameterized through a sigmoid so the [0,1] clamp stays differentiable; the
neuron drive is read before its ReLU, which keeps a usable ascent direction
even where the neuron is dead on benign images.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .nn import (
    DTYPE,
    LinearObjective,
    NeuronAddress,
    forward,
    hidden_sites,
    input_gradient_from_trace,
    predict,
)


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 1.0              # weight of the neuron-drive term
    beta: float = 1.0               # weight of the induced-logit term
    lambda_scale: float = 0.05      # L1 mask penalty, scaled by 1/(h*w)
    iterations: int = 200
    initial_step: float = 0.1
    plateau_patience: int = 25      # accepted steps without progress -> stop
    plateau_tol: float = 1e-5
    seed: int = 42


@dataclass
class Trigger:
    mask: np.ndarray = field(repr=False)     # [h,w] in [0,1]
    pattern: np.ndarray = field(repr=False)  # [h,w,c] in [0,1]
    provenance: object = None                # CNCRecord that produced it
    converged: bool = True
    objective: float = 0.0
    objective_history: list = field(default_factory=list, repr=False)


@dataclass
class TriggerResult:
    trigger: Trigger
    target_label: int
    asr: float
    classes_misclassified: float
    is_backdoor: bool
    mask_area_fraction: float
    suspect_global: bool


def apply_trigger(image, mask, pattern):
    """out = image*(1-mask) + pattern*mask, mask broadcast over channels."""
    image = np.asarray(image, dtype=DTYPE)
    if mask.shape != image.shape[:2] or pattern.shape != image.shape:
        raise ShapeMismatch("<trigger>", image.shape, (mask.shape, pattern.shape))
    m = mask[:, :, None]
    return np.clip(image * (1.0 - m) + pattern * m, 0.0, 1.0).astype(DTYPE)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _param_index_for(net, site_index):
    for s in hidden_sites(net):
        if s.site_index == site_index:
            return s.param_index
    return site_index


def benign_scales(net, images, cnc):
    """Magnitude of the benign logits and site pre-activations.

    The ascent objective is normalized by these, which keeps the L1 mask
    penalty meaningful whatever the network's logit scale.
    """
    param_index = _param_index_for(net, cnc.address.layer_index)
    logit_scale, act_scale = 1.0, 1.0
    for img in images:
        trace = forward(net, img)
        logit_scale = max(logit_scale, float(np.abs(trace.logits).max()))
        act_scale = max(act_scale, float(np.abs(trace.activations[param_index]).max()))
    return act_scale, logit_scale


def objective_terms(net, images, mask, pattern, cnc, config, scales=(1.0, 1.0)):
    """J, dJ/dmask and dJ/dpattern for the current blended patch.

    J = mean_i [alpha * drive_i / act_scale + beta * logit_i(target) /
    logit_scale] - lambda * |mask|_1, where drive is the mean pre-activation
    over the CNC's stimulated positions.
    """
    h, w = mask.shape
    lam = config.lambda_scale / (h * w)
    act_scale, logit_scale = scales
    param_index = _param_index_for(net, cnc.address.layer_index)
    n = len(images)
    coeffs = {
        NeuronAddress(param_index, p): config.alpha / (n * len(cnc.positions) * act_scale)
        for p in cnc.positions
    }
    objective = LinearObjective(
        logit_coeffs={cnc.induced_label: config.beta / (n * logit_scale)},
        activation_coeffs=coeffs,
    )
    value = -lam * float(mask.sum())
    g_mask = np.full(mask.shape, -lam, dtype=np.float64)
    g_pattern = np.zeros(pattern.shape, dtype=np.float64)
    for img in images:
        stamped = apply_trigger(img, mask, pattern)
        trace = forward(net, stamped)
        value += objective.value(trace.logits, trace.activations)
        g_img = input_gradient_from_trace(net, trace, objective)
        g_mask += (g_img * (pattern - img)).sum(axis=2)
        g_pattern += g_img * mask[:, :, None]
    return value, g_mask, g_pattern


def reverse_engineer(net, cnc, sample_images, config=OptimizerConfig()):
    """Gradient-ascent trigger synthesis for one CNC on the original network.

    Fixed iteration budget with step halving whenever the objective would
    decrease, so the objective is non-decreasing across accepted steps. The
    result is flagged non-converged when still improving >1% at budget end.
    """
    h, w, _ = net.input_shape
    rs = np.random.RandomState(config.seed)
    u = np.full((h, w), -4.0)  # near-empty initial mask, sigmoid(-4) ~ 0.018
    q = rs.randn(*net.input_shape) * 0.1  # pattern starts near 0.5
    scales = benign_scales(net, sample_images, cnc)

    def evaluate(u_, q_):
        m = _sigmoid(u_).astype(DTYPE)
        p = _sigmoid(q_).astype(DTYPE)
        val, gm, gp = objective_terms(net, sample_images, m, p, cnc, config, scales)
        gu = gm * (m * (1.0 - m))
        gq = gp * (p * (1.0 - p))
        return val, gu, gq

    value, gu, gq = evaluate(u, q)
    step = config.initial_step
    history = [value]
    stall = 0
    for _ in range(config.iterations):
        if step < 1e-12:
            break
        nu = u + step * gu
        nq = q + step * gq
        nval, ngu, ngq = evaluate(nu, nq)
        if nval >= value:
            improved = nval - value > config.plateau_tol * max(1.0, abs(value))
            u, q, gu, gq = nu, nq, ngu, ngq
            value = nval
            history.append(value)
            step = min(step * 1.2, 50.0 * config.initial_step)
            stall = 0 if improved else stall + 1
            if stall >= config.plateau_patience:
                break
        else:
            step *= 0.5
            stall += 1
            if stall >= 4 * config.plateau_patience:
                break

    window = min(10, len(history) - 1)
    converged = True
    if window > 0:
        recent = history[-1] - history[-1 - window]
        converged = recent <= 0.01 * max(1.0, abs(history[-1]))
    return Trigger(
        mask=_sigmoid(u).astype(DTYPE),
        pattern=_sigmoid(q).astype(DTYPE),
        provenance=cnc,
        converged=converged,
        objective=float(value),
        objective_history=[float(v) for v in history],
    )


def compute_asr(net, trigger, images, labels, target_label):
    """Fraction of stamped non-target images predicted as the target."""
    labels = np.asarray(labels)
    keep = np.flatnonzero(labels != target_label)
    if len(images) == 0 or len(keep) == 0:
        raise EmptyDataset("no non-target images to stamp")
    hits = sum(
        predict(net, apply_trigger(images[i], trigger.mask, trigger.pattern)) == target_label
        for i in keep)
    return hits / len(keep)


SUSPECT_GLOBAL_AREA = 0.25
BACKDOOR_CLASS_FRACTION = 0.8


def evaluate_trigger(net, trigger, images, labels, target_label):
    """Full scoring: ASR, per-class flip fractions and the backdoor verdict.

    A class counts as misclassified when at least half of its stamped images
    flip to the target; a backdoor needs >= 80% of the non-target classes.
    Triggers whose mask mass covers more than 25% of the image are flagged
    suspect-global (whole-image repaints) and never counted as backdoors.
    """
    labels = np.asarray(labels)
    keep = np.flatnonzero(labels != target_label)
    if len(images) == 0 or len(keep) == 0:
        raise EmptyDataset("no non-target images to stamp")
    flips = {}
    for i in keep:
        stamped = apply_trigger(images[i], trigger.mask, trigger.pattern)
        hit = predict(net, stamped) == target_label
        total, won = flips.get(int(labels[i]), (0, 0))
        flips[int(labels[i])] = (total + 1, won + bool(hit))
    asr = sum(won for _, won in flips.values()) / len(keep)
    classes_hit = sum(1 for total, won in flips.values() if won >= 0.5 * total)
    classes_misclassified = classes_hit / len(flips)
    h, w = trigger.mask.shape
    area = float(trigger.mask.sum()) / (h * w)
    suspect = area > SUSPECT_GLOBAL_AREA
    return TriggerResult(
        trigger=trigger,
        target_label=int(target_label),
        asr=asr,
        classes_misclassified=classes_misclassified,
        is_backdoor=classes_misclassified >= BACKDOOR_CLASS_FRACTION,
        mask_area_fraction=area,
        suspect_global=suspect,
    )


def _binary_mask(trigger):
    return trigger.mask >= 0.5


def _mask_iou(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum()) / float(union)


TRIGGER_SCHEMA = "agnes-trigger/1"


def save_trigger(trigger, stem, asr=None):
    """Writes <stem>.json + <stem>.bin: mask and pattern as u8 pixels."""
    import json
    import os

    from .model_io import atomic_write, quantize_images

    h, w = trigger.mask.shape
    c = trigger.pattern.shape[2]
    mask_u8 = np.clip(np.rint(trigger.mask * 255.0), 0, 255).astype(np.uint8)
    pattern_u8 = quantize_images(trigger.pattern)
    manifest = {
        "schema": TRIGGER_SCHEMA,
        "height": h,
        "width": w,
        "channels": c,
        "induced_label": int(trigger.provenance.induced_label)
        if trigger.provenance else -1,
        "converged": bool(trigger.converged),
        "blob_file": os.path.basename(stem) + ".bin",
    }
    if asr is not None:
        manifest["asr"] = float(asr)
    atomic_write(stem + ".bin", mask_u8.tobytes() + pattern_u8.tobytes())
    atomic_write(stem + ".json", (json.dumps(manifest, indent=1, sort_keys=True)
                                  + "\n").encode())


def load_trigger(path):
    """Reads a trigger manifest+blob pair; returns (mask, pattern, label)."""
    import json
    import os

    from .errors import IoError, ParseError, VersionMismatch

    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    if manifest.get("schema") != TRIGGER_SCHEMA:
        raise VersionMismatch(f"{path}: expected {TRIGGER_SCHEMA}")
    h, w, c = int(manifest["height"]), int(manifest["width"]), int(manifest["channels"])
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                             manifest["blob_file"])
    try:
        with open(blob_path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {blob_path}: {e}") from e
    if len(raw) != h * w + h * w * c:
        raise ParseError(f"{blob_path}: wrong blob size")
    mask = np.frombuffer(raw, np.uint8, h * w).reshape(h, w).astype(DTYPE) / 255.0
    pattern = np.frombuffer(raw, np.uint8, h * w * c, h * w).reshape(h, w, c)
    return mask.astype(DTYPE), (pattern.astype(DTYPE) / 255.0).astype(DTYPE), \
        int(manifest["induced_label"])


def count_backdoors(results):
    """Confirmed backdoors after deduplication.

    Two results with the same induced label whose binarized masks overlap
    with IoU > 0.5 count once. Suspect-global results are reported upstream
    but never counted.
    """
    eligible = [r for r in results if r.is_backdoor and not r.suspect_global]
    eligible.sort(key=lambda r: (-r.asr, r.trigger.provenance.address.layer_index
                                 if r.trigger.provenance else 0,
                                 r.trigger.provenance.address.flat_index
                                 if r.trigger.provenance else 0))
    kept = []
    for r in eligible:
        bm = _binary_mask(r.trigger)
        dup = any(k.target_label == r.target_label and
                  _mask_iou(_binary_mask(k.trigger), bm) > 0.5 for k in kept)
        if not dup:
            kept.append(r)
    return len(kept)
