"""Stimulation sweeps and compromised-neuron-candidate (CNC) identification.

A sweep replaces the post-activation output at chosen positions of one hidden
site with a stimulation value, propagates the tail of the network, and
records the induced label per sampled image. Sweep axes (targets x values x
images) are pure maps over an immutable network, so they can run on a thread
pool; results are merged in fixed target order regardless of worker count.

Target granularity: on 1-D (FC-shaped) sites one target per neuron; on 3-D
(conv-shaped) sites one target per feature map, covering that feature's CR
positions only (or the whole feature for the baseline scanner). Features
without any CR are skipped, which is where the sweep saves its time.
"""

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, IndexOutOfRange, InvalidConfig, ShapeMismatch
from .nn import DTYPE, NeuronAddress, forward, forward_from, hidden_sites

VALUE_MULTIPLIERS = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0)
FALLBACK_GRID = (-10.0, -5.0, -1.0, 1.0, 5.0, 10.0)


def build_value_grid(profile):
    """Stimulation values scaled by the layer's max benign activation."""
    layer_max = float(profile.per_neuron_max.max())
    if layer_max <= 0.0:
        # dead layer: fall back to an absolute grid
        return list(FALLBACK_GRID)
    values = sorted({s * m * layer_max for m in VALUE_MULTIPLIERS for s in (-1.0, 1.0)})
    return values


@dataclass(frozen=True)
class SweepTarget:
    site_index: int
    positions: tuple  # flat indices whose activation is replaced
    address: NeuronAddress  # representative neuron, used for reporting
    feature: int = -1  # conv channel for grouped targets, -1 for single neurons


@dataclass
class StimulationPlan:
    mode: str  # abssm | aproxsm | baseline_all | baseline_feature
    targets: list
    values_by_site: dict  # site_index -> ascending value list
    samples: list  # (dataset index, true label)


@dataclass
class SweepOutcome:
    mode: str
    targets: list
    values_by_site: dict
    sample_labels: list
    induced: list = field(repr=False)  # per completed target: [n_values, n_samples]
    elapsed_ms: float = 0.0
    partial: bool = False


def select_samples(labels, n_per_class=2, seed=42):
    """First n images of each class under the fixed seed's shuffle."""
    labels = np.asarray(labels)
    order = np.random.RandomState(seed).permutation(len(labels))
    picked = {}
    for i in order:
        lbl = int(labels[i])
        bucket = picked.setdefault(lbl, [])
        if len(bucket) < n_per_class:
            bucket.append(int(i))
    if len(picked) < 2:
        raise InvalidConfig("stimulation needs samples from at least 2 classes")
    samples = [(i, lbl) for lbl in sorted(picked) for i in picked[lbl]]
    return samples


def _stimulate(net, site_index, positions, value, image):
    trace = forward(net, image)
    act = trace.activations[site_index].reshape(-1).copy()
    act[positions] = DTYPE(value)
    logits = forward_from(net, site_index, act.reshape(trace.activations[site_index].shape))
    return int(np.argmax(logits))


def stimulate_abs(abs_net, addr, value, image):
    """Single-neuron stimulation on the abstract (CR-only) network."""
    net = abs_net.network if hasattr(abs_net, "network") else abs_net
    shapes = net.layer_shapes()
    if not 0 <= addr.layer_index < len(net.layers):
        raise IndexOutOfRange(f"no layer {addr.layer_index}")
    width = int(np.prod(shapes[addr.layer_index]))
    if not 0 <= addr.flat_index < width:
        raise IndexOutOfRange(f"flat index {addr.flat_index} outside layer of {width}")
    return _stimulate(net, addr.layer_index, [addr.flat_index], value, image)


def stimulate_aprox(net, site_index, cr_mask, value, image):
    """Masked stimulation on the original network: out = act*(1-m) + v*m."""
    shapes = net.layer_shapes()
    mask = np.asarray(cr_mask)
    if tuple(mask.shape) != shapes[site_index]:
        raise ShapeMismatch(net.layers[site_index].name, shapes[site_index], mask.shape)
    positions = np.flatnonzero(mask.reshape(-1))
    return _stimulate(net, site_index, positions, value, image)


def _channel_groups(flats, shape):
    """Group flat indices of a [h,w,c] site by channel, ascending."""
    c = shape[2]
    groups = {}
    for f in sorted(int(v) for v in flats):
        groups.setdefault(f % c, []).append(f)
    return groups


def aproxsm_targets(net, crset):
    """One target per CR neuron (1-D sites) or per feature holding CRs (3-D)."""
    targets = []
    by_site = crset.by_site()
    for site in hidden_sites(net):
        ca = by_site.get(site.site_index)
        if ca is None:
            continue
        reps = sorted(int(r) for r in ca.representatives)
        if len(site.shape) == 3:
            for ch, flats in sorted(_channel_groups(reps, site.shape).items()):
                targets.append(SweepTarget(site.site_index, tuple(flats),
                                           NeuronAddress(site.site_index, flats[0]),
                                           feature=ch))
        else:
            targets.extend(SweepTarget(site.site_index, (r,),
                                       NeuronAddress(site.site_index, r)) for r in reps)
    return targets


def abssm_targets(abs_net):
    """Every neuron of every hidden site of the abstract network."""
    targets = []
    for site in hidden_sites(abs_net.network):
        targets.extend(
            SweepTarget(site.site_index, (i,), NeuronAddress(site.site_index, i))
            for i in range(site.width))
    return targets


def baseline_targets(net):
    """ABS-style exhaustive targets: whole features on conv sites, every
    neuron on FC sites."""
    targets = []
    for site in hidden_sites(net):
        if len(site.shape) == 3:
            h, w, c = site.shape
            for ch in range(c):
                flats = tuple(range(ch, h * w * c, c))
                targets.append(SweepTarget(site.site_index, flats,
                                           NeuronAddress(site.site_index, flats[0]),
                                           feature=ch))
        else:
            targets.extend(SweepTarget(site.site_index, (i,),
                                       NeuronAddress(site.site_index, i))
                           for i in range(site.width))
    return targets


class Deadline:
    """Cooperative wall-clock cancellation checked between grid cells."""

    def __init__(self, seconds):
        self.expiry = None if seconds is None else time.monotonic() + seconds
        self._hit = threading.Event()

    def expired(self):
        if self.expiry is not None and time.monotonic() >= self.expiry:
            self._hit.set()
        return self._hit.is_set()


def run_sweep(net, images, plan, threads=1, deadline=None):
    """Executes the full sweep grid; deterministic for any thread count."""
    if not plan.targets:
        raise DegenerateInput("stimulation plan has no targets")
    start = time.perf_counter()
    shapes = net.layer_shapes()
    needed_sites = sorted({t.site_index for t in plan.targets})

    base = []  # per sample: {site_index: flat activation}
    for idx, _ in plan.samples:
        trace = forward(net, images[idx])
        base.append({s: trace.activations[s].reshape(-1).copy() for s in needed_sites})

    def sweep_target(target):
        values = plan.values_by_site[target.site_index]
        shape = shapes[target.site_index]
        out = np.empty((len(values), len(plan.samples)), dtype=np.int64)
        pos = np.asarray(target.positions, dtype=np.int64)
        for vi, v in enumerate(values):
            if deadline is not None and deadline.expired():
                return None
            for si in range(len(plan.samples)):
                act = base[si][target.site_index].copy()
                act[pos] = DTYPE(v)
                logits = forward_from(net, target.site_index, act.reshape(shape))
                out[vi, si] = int(np.argmax(logits))
        return out

    results = []
    if threads <= 1:
        for t in plan.targets:
            results.append(sweep_target(t))
            if results[-1] is None:
                break
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for r in pool.map(sweep_target, plan.targets):
                results.append(r)

    completed, induced, partial = [], [], False
    for t, r in zip(plan.targets, results):
        if r is None:
            partial = True
            break
        completed.append(t)
        induced.append(r)
    if len(completed) < len(plan.targets):
        partial = True

    return SweepOutcome(
        mode=plan.mode,
        targets=completed,
        values_by_site=plan.values_by_site,
        sample_labels=[lbl for _, lbl in plan.samples],
        induced=induced,
        elapsed_ms=(time.perf_counter() - start) * 1000.0,
        partial=partial,
    )


def baseline_scan(net, images, plan, threads=1, deadline=None):
    """ABS-style exhaustive sweep (whole features / every neuron)."""
    if plan.mode not in ("baseline_all", "baseline_feature"):
        raise InvalidConfig(f"baseline_scan expects a baseline plan, got {plan.mode!r}")
    return run_sweep(net, images, plan, threads=threads, deadline=deadline)


@dataclass(frozen=True)
class CNCRecord:
    address: NeuronAddress
    value_lo: float
    value_hi: float
    induced_label: int
    consistency: float
    positions: tuple  # stimulated positions (CR group for conv features)
    benign_label_excluded: bool = True


def _best_shift(row_labels, true_labels):
    """Most consistent induced label for one (target, value) cell.

    Consistency counts only images whose true label differs from the induced
    one, and the flipped images must span at least two true classes.
    """
    best = None
    for cand in sorted(set(int(l) for l in row_labels)):
        non_cand = [i for i, y in enumerate(true_labels) if y != cand]
        if not non_cand:
            continue
        flipped = [i for i in non_cand if int(row_labels[i]) == cand]
        if len({true_labels[i] for i in flipped}) < 2:
            continue
        frac = len(flipped) / len(non_cand)
        if best is None or frac > best[1]:
            best = (cand, frac)
    return best


def identify_cncs(outcome, cnc_threshold=0.9):
    """CNC records from a sweep: qualifying contiguous value runs, merged."""
    if len(set(outcome.sample_labels)) < 2:
        raise InvalidConfig("sweep covered fewer than 2 true classes")
    records = []
    for target, grid in zip(outcome.targets, outcome.induced):
        values = outcome.values_by_site[target.site_index]
        run = None  # (label, lo_idx, hi_idx, best_frac)
        cells = []
        for vi in range(len(values)):
            shift = _best_shift(grid[vi], outcome.sample_labels)
            cells.append(shift if shift and shift[1] >= cnc_threshold else None)
        cells.append(None)  # terminator
        for vi, cell in enumerate(cells):
            if cell is not None and run is not None and cell[0] == run[0]:
                run = (run[0], run[1], vi, max(run[3], cell[1]))
            else:
                if run is not None:
                    records.append(CNCRecord(
                        address=target.address,
                        value_lo=float(values[run[1]]),
                        value_hi=float(values[run[2]]),
                        induced_label=int(run[0]),
                        consistency=float(run[3]),
                        positions=target.positions,
                    ))
                run = (cell[0], vi, vi, cell[1]) if cell is not None else None
    records.sort(key=lambda r: (-r.consistency, -(r.value_hi - r.value_lo),
                                r.address.layer_index, r.address.flat_index,
                                r.induced_label))
    return records
