"""End-to-end detection pipeline and the machine-readable run report.

Flow: load model+data, pick the stimulation method (abstract-network
stimulation for pure FC/conv models, masked stimulation of cluster
representatives on the original model otherwise, with a wall-clock timeout
that falls back from the former to the latter), then cluster, sweep,
reverse-engineer triggers for the best candidates and score them.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .abstraction import (
    choose_abstraction_rate,
    cluster_sites,
    profile_activations,
    select_representatives,
)
from .conv2fc import CONVERTIBLE_KINDS, convert_network
from .errors import EmptyDataset, InvalidConfig, LabelOutOfRange, UnsupportedLayer
from .kernels import BACKEND_NAME
from .model_io import atomic_write, load_dataset, load_model
from .nn import NeuronAddress, hidden_sites
from .stimulation import (
    Deadline,
    StimulationPlan,
    abssm_targets,
    aproxsm_targets,
    baseline_targets,
    build_value_grid,
    identify_cncs,
    run_sweep,
    select_samples,
)
from .trigger import OptimizerConfig, count_backdoors, evaluate_trigger, reverse_engineer

REPORT_SCHEMA = "agnes-report/1"
ALL_KINDS = {"fully_connected", "sparse_fc", "conv2d", "relu", "maxpool2d",
             "flatten", "dropout", "softmax"}


@dataclass
class RunConfig:
    model_path: str
    dataset_path: str
    method: str = "auto"  # auto | abssm | aproxsm | baseline
    clustering_rate: float = 0.10
    drop_budget: float = 0.05
    cnc_threshold: float = 0.9
    abssm_timeout_seconds: float = 600.0
    seed: int = 42
    sample_cap: int = 5000
    n_per_class: int = 2
    max_triggers: int = 12
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    report_path: str = ""
    cnc_csv_path: str = ""
    triggers_dir: str = ""
    threads: int = 0  # 0: use AGNES_THREADS, default 1

    def validate(self):
        if self.method not in ("auto", "abssm", "aproxsm", "baseline"):
            raise InvalidConfig(f"unknown method {self.method!r}")
        for name in ("clustering_rate", "drop_budget", "cnc_threshold"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise InvalidConfig(f"{name}={v} outside (0,1]")
        if self.abssm_timeout_seconds <= 0:
            raise InvalidConfig("timeout must be positive")
        if self.sample_cap < 1 or self.n_per_class < 1 or self.max_triggers < 1:
            raise InvalidConfig("sample_cap, n_per_class, max_triggers must be >= 1")

    def worker_count(self):
        if self.threads > 0:
            return self.threads
        return max(1, int(os.environ.get("AGNES_THREADS", "1")))


def select_method(net, config):
    """Layer-kind rule: abstract stimulation only for FC/conv networks."""
    kinds = {layer.kind for layer in net.layers}
    unknown = kinds - ALL_KINDS
    if unknown:
        raise UnsupportedLayer(sorted(unknown)[0])
    if kinds <= CONVERTIBLE_KINDS:
        return "abssm", "fc-conv-only"
    return "aproxsm", "complex-layers"


class _Phases:
    def __init__(self):
        self.timings = {}

    def measure(self, name):
        return _Timer(self.timings, name)


class _Timer:
    def __init__(self, sink, name):
        self.sink = sink
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + (
            time.perf_counter() - self.start) * 1000.0
        return False


def _grids_for(profiles, sites_needed):
    by_site = {p.site_index: p for p in profiles}
    return {s: build_value_grid(by_site[s]) for s in sites_needed}


def _crs_summary(net, crset):
    shapes = net.layer_shapes()
    out = []
    for ca in crset.assignments:
        reps = select_representatives(ca, shapes[ca.site_index])
        out.append({
            "layer_index": ca.site_index,
            "width": int(len(ca.assignment)),
            "k": int(ca.k),
            "cr_flat_indices": [int(r) for r in ca.representatives],
            "cr_positions": [list(pos) for _, pos in reps],
        })
    return out


def _cnc_dicts(cncs, shapes):
    out = []
    for r in cncs:
        shape = shapes[r.address.layer_index]
        pos = [int(v) for v in np.unravel_index(r.address.flat_index, shape)] \
            if len(shape) > 1 else [r.address.flat_index]
        out.append({
            "layer_index": r.address.layer_index,
            "flat_index": r.address.flat_index,
            "position": pos,
            "value_lo": float(r.value_lo),
            "value_hi": float(r.value_hi),
            "induced_label": int(r.induced_label),
            "consistency": float(r.consistency),
            "stimulated_positions": [int(p) for p in r.positions],
            "benign_label_excluded": bool(r.benign_label_excluded),
        })
    return out


def _map_cncs_to_original(cncs, absnet):
    mapped = []
    for r in cncs:
        site = r.address.layer_index
        cr = absnet.cr_flat[site]
        mapped.append(type(r)(
            address=NeuronAddress(site, int(cr[r.address.flat_index])),
            value_lo=r.value_lo, value_hi=r.value_hi,
            induced_label=r.induced_label, consistency=r.consistency,
            positions=tuple(sorted(int(cr[p]) for p in r.positions)),
        ))
    return mapped


def _top_mask_cells(mask, n):
    """The n strongest mask cells as [y, x] pairs, strongest first."""
    flat = np.argsort(-mask.reshape(-1), kind="stable")[:n]
    w = mask.shape[1]
    return [[int(f) // w, int(f) % w] for f in flat]


def _pick_trigger_candidates(cncs, limit):
    """Best record per address, ranked; at most `limit` kept."""
    seen = set()
    picked = []
    for r in cncs:  # already sorted by identify_cncs
        if r.address in seen:
            continue
        seen.add(r.address)
        picked.append(r)
        if len(picked) >= limit:
            break
    return picked


def run(config):
    """Executes the full pipeline and returns the report dict."""
    config.validate()
    phases = _Phases()
    threads = config.worker_count()

    with phases.measure("load"):
        net = load_model(config.model_path)
        ds = load_dataset(config.dataset_path)
    if len(ds) == 0:
        raise EmptyDataset(f"{config.dataset_path} holds no images")
    if int(ds.labels.max()) >= net.class_count:
        raise LabelOutOfRange(
            f"label {int(ds.labels.max())} outside model's {net.class_count} classes")
    if ds.image_shape != net.input_shape:
        from .errors import ShapeMismatch

        raise ShapeMismatch("<dataset>", net.input_shape, ds.image_shape)

    images = list(ds.images)
    labels = [int(l) for l in ds.labels]
    samples = select_samples(labels, config.n_per_class, config.seed)

    if config.method == "auto":
        requested, reason = select_method(net, config)
    else:
        requested, reason = config.method, "forced"
    used = requested

    abstraction_info = None
    crs_report = []
    cncs = []
    outcome = None

    if requested == "abssm":
        deadline = Deadline(config.abssm_timeout_seconds) if config.method == "auto" \
            else None
        done = False
        with phases.measure("abstraction"):
            converted = convert_network(net)
            profiles = profile_activations(converted, images,
                                           sample_cap=config.sample_cap,
                                           seed=config.seed)
            if deadline is None or not deadline.expired():
                rate, absnet = choose_abstraction_rate(
                    converted, images, labels, config.drop_budget,
                    seed=config.seed, sample_cap=config.sample_cap,
                    profiles=profiles, deadline=deadline)
        if deadline is None or not deadline.expired():
            sites = [s.site_index for s in hidden_sites(absnet.network)]
            plan = StimulationPlan(mode="abssm", targets=abssm_targets(absnet),
                                   values_by_site=_grids_for(profiles, sites),
                                   samples=samples)
            with phases.measure("stimulation"):
                outcome = run_sweep(absnet.network, images, plan,
                                    threads=threads, deadline=deadline)
            if not outcome.partial:
                cncs = _map_cncs_to_original(
                    identify_cncs(outcome, config.cnc_threshold), absnet)
                abstraction_info = {
                    "rate": float(rate),
                    "accuracy_drop": float(absnet.accuracy_drop),
                }
                crs_report = _crs_summary(net, absnet.crset)
                done = True
        if not done:
            used, reason = "aproxsm", "timeout"

    if used in ("aproxsm", "baseline"):
        with phases.measure("profiling"):
            profiles = profile_activations(net, images, sample_cap=config.sample_cap,
                                           seed=config.seed)
        if used == "aproxsm":
            with phases.measure("clustering"):
                crset = cluster_sites(profiles, config.clustering_rate, config.seed)
            targets = aproxsm_targets(net, crset)
            crs_report = _crs_summary(net, crset)
            mode = "aproxsm"
        else:
            targets = baseline_targets(net)
            has_conv = any(len(s.shape) == 3 for s in hidden_sites(net))
            mode = "baseline_feature" if has_conv else "baseline_all"
        sites = sorted({t.site_index for t in targets})
        plan = StimulationPlan(mode=mode, targets=targets,
                               values_by_site=_grids_for(profiles, sites),
                               samples=samples)
        with phases.measure("stimulation"):
            outcome = run_sweep(net, images, plan, threads=threads)
        cncs = identify_cncs(outcome, config.cnc_threshold)

    candidates = _pick_trigger_candidates(cncs, config.max_triggers)
    sample_imgs = [images[i] for i, _ in samples]
    opt = OptimizerConfig(**{**asdict(config.optimizer), "seed": config.seed})

    with phases.measure("reverse_engineering"):
        if threads > 1 and len(candidates) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                triggers = list(pool.map(
                    lambda c: reverse_engineer(net, c, sample_imgs, opt), candidates))
        else:
            triggers = [reverse_engineer(net, c, sample_imgs, opt) for c in candidates]

    with phases.measure("evaluation"):
        results = [evaluate_trigger(net, t, images, labels, t.provenance.induced_label)
                   for t in triggers]
    backdoors = count_backdoors(results)

    shapes = net.layer_shapes()
    report = {
        "schema": REPORT_SCHEMA,
        "engine": {"name": "agnes", "version": __version__, "kernels": BACKEND_NAME},
        "config": {
            "model_path": config.model_path,
            "dataset_path": config.dataset_path,
            "method": config.method,
            "clustering_rate": config.clustering_rate,
            "drop_budget": config.drop_budget,
            "cnc_threshold": config.cnc_threshold,
            "abssm_timeout_seconds": config.abssm_timeout_seconds,
            "seed": config.seed,
            "sample_cap": config.sample_cap,
            "n_per_class": config.n_per_class,
            "max_triggers": config.max_triggers,
            "optimizer": asdict(config.optimizer),
        },
        "dataset": {"count": len(ds), "image_shape": list(ds.image_shape),
                    "class_count": net.class_count},
        "method": {"requested": requested, "used": used, "reason": reason},
        "abstraction": abstraction_info,
        "crs": crs_report,
        "value_grids": {str(k): [float(v) for v in vs]
                        for k, vs in (outcome.values_by_site if outcome else {}).items()},
        "stimulation": {
            "mode": outcome.mode if outcome else None,
            "target_count": len(outcome.targets) if outcome else 0,
            "sampled_images": [[int(i), int(l)] for i, l in samples],
            "partial": bool(outcome.partial) if outcome else False,
        },
        "cncs": _cnc_dicts(cncs, shapes),
        "triggers": [
            {
                "layer_index": r.trigger.provenance.address.layer_index,
                "flat_index": r.trigger.provenance.address.flat_index,
                "induced_label": r.target_label,
                "asr": float(r.asr),
                "classes_misclassified": float(r.classes_misclassified),
                "is_backdoor": bool(r.is_backdoor),
                "mask_area_fraction": float(r.mask_area_fraction),
                "suspect_global": bool(r.suspect_global),
                "converged": bool(r.trigger.converged),
                "objective": float(r.trigger.objective),
                "mask_top4": _top_mask_cells(r.trigger.mask, 4),
            }
            for r in results
        ],
        "backdoor_count": int(backdoors),
        "partial": bool(outcome.partial) if outcome else False,
        "timings_ms": {k: round(v, 3) for k, v in phases.timings.items()},
    }

    if config.report_path:
        emit_report(report, config.report_path)
    if config.cnc_csv_path:
        emit_cnc_csv(report, config.cnc_csv_path)
    if config.triggers_dir:
        from .trigger import save_trigger

        os.makedirs(config.triggers_dir, exist_ok=True)
        for i, (t, r) in enumerate(zip(triggers, results)):
            stem = os.path.join(config.triggers_dir, f"trigger-{i:02d}")
            save_trigger(t, stem, asr=r.asr)
    return report


def emit_report(report, path):
    """Versioned JSON with stable key order, byte-stable except timings."""
    atomic_write(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())


def emit_cnc_csv(report, path):
    fields = ["layer_index", "flat_index", "induced_label", "value_lo", "value_hi",
              "consistency"]
    rows = [[str(c[f]) for f in fields] for c in report["cncs"]]
    text = ",".join(fields) + "\n" + "".join(",".join(r) + "\n" for r in rows)
    atomic_write(path, text.encode())


def load_report(path):
    with open(path, "r", encoding="utf-8") as f:
        report = json.load(f)
    if report.get("schema") != REPORT_SCHEMA:
        from .errors import VersionMismatch

        raise VersionMismatch(f"{path}: not a {REPORT_SCHEMA} report")
    return report
