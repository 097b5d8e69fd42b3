"""Command-line entry point.

Subcommands:
  agnes detect   -- run the full backdoor detection pipeline
  agnes abstract -- emit the abstracted (CR-only) model under a drop budget
  agnes stamp    -- apply a saved trigger to one dataset image
  agnes eval     -- dump per-image logits (cross-framework parity checks)

Errors exit with stable per-class codes (see agnes.errors.EXIT_CODES).
AGNES_THREADS caps the worker count of the parallel phases.
"""

import argparse
import json
import sys

import numpy as np

from .errors import AgnesError
from .pipeline import RunConfig, emit_report, run
from .trigger import OptimizerConfig


def _detect_args(sub):
    p = sub.add_parser("detect", help="run backdoor detection")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="auto",
                   choices=["auto", "abssm", "aproxsm", "baseline"])
    p.add_argument("--clustering-rate", type=float, default=0.10)
    p.add_argument("--drop-budget", type=float, default=0.05)
    p.add_argument("--cnc-threshold", type=float, default=0.9)
    p.add_argument("--timeout", type=float, default=600.0,
                   help="seconds before abstract stimulation falls back")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sample-cap", type=int, default=5000)
    p.add_argument("--n-per-class", type=int, default=2)
    p.add_argument("--max-triggers", type=int, default=12)
    p.add_argument("--iterations", type=int, default=200,
                   help="trigger optimization budget")
    p.add_argument("--report", default="")
    p.add_argument("--cnc-csv", default="")
    p.add_argument("--triggers-dir", default="")
    return p


def _cmd_detect(args):
    config = RunConfig(
        model_path=args.model,
        dataset_path=args.data,
        method=args.method,
        clustering_rate=args.clustering_rate,
        drop_budget=args.drop_budget,
        cnc_threshold=args.cnc_threshold,
        abssm_timeout_seconds=args.timeout,
        seed=args.seed,
        sample_cap=args.sample_cap,
        n_per_class=args.n_per_class,
        max_triggers=args.max_triggers,
        optimizer=OptimizerConfig(iterations=args.iterations),
        report_path=args.report,
        cnc_csv_path=args.cnc_csv,
        triggers_dir=args.triggers_dir,
    )
    report = run(config)
    if not args.report:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    else:
        used = report["method"]["used"]
        print(f"method={used} cncs={len(report['cncs'])} "
              f"backdoors={report['backdoor_count']} report={args.report}")
    return 0


def _cmd_abstract(args):
    from .abstraction import choose_abstraction_rate
    from .conv2fc import convert_network
    from .model_io import load_dataset, load_model, save_model

    net = load_model(args.model)
    ds = load_dataset(args.data)
    converted = convert_network(net)
    rate, absnet = choose_abstraction_rate(
        converted, list(ds.images), [int(l) for l in ds.labels],
        args.drop_budget, seed=args.seed, sample_cap=args.sample_cap)
    save_model(absnet.network, args.out)
    print(f"rate={rate} accuracy_drop={absnet.accuracy_drop:.4f} out={args.out}")
    return 0


def _cmd_stamp(args):
    from .model_io import load_dataset, quantize_images, save_dataset
    from .trigger import apply_trigger, load_trigger

    ds = load_dataset(args.data)
    if not 0 <= args.image_index < len(ds):
        from .errors import IndexOutOfRange

        raise IndexOutOfRange(f"image index {args.image_index} outside dataset "
                              f"of {len(ds)}")
    mask, pattern, _ = load_trigger(args.trigger)
    stamped = apply_trigger(ds.images[args.image_index], mask, pattern)
    save_dataset(args.out, quantize_images(stamped[None]),
                 [int(ds.labels[args.image_index])])
    print(f"stamped image {args.image_index} -> {args.out}")
    return 0


def _cmd_eval(args):
    from .model_io import load_dataset, load_model
    from .nn import forward

    net = load_model(args.model)
    ds = load_dataset(args.data)
    logits = [[float(v) for v in forward(net, img).logits] for img in ds.images]
    payload = json.dumps({"logits": logits}, indent=1) + "\n"
    if args.out:
        from .model_io import atomic_write

        atomic_write(args.out, payload.encode())
    else:
        sys.stdout.write(payload)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="agnes",
                                     description="Backdoor detection for image "
                                                 "classifiers")
    sub = parser.add_subparsers(dest="command", required=True)
    _detect_args(sub)

    p = sub.add_parser("abstract", help="emit an abstracted model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--drop-budget", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sample-cap", type=int, default=5000)

    p = sub.add_parser("stamp", help="apply a saved trigger to one image")
    p.add_argument("--image-index", type=int, required=True)
    p.add_argument("--trigger", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="dump per-image logits as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="")
    return parser


COMMANDS = {
    "detect": _cmd_detect,
    "abstract": _cmd_abstract,
    "stamp": _cmd_stamp,
    "eval": _cmd_eval,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except AgnesError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
