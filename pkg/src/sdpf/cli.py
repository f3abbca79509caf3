"""Command-line entry point: ``sdpf {generate,train,evaluate,sweep,gradcheck,oracle}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checks import LG_SPEC_1D, LG_SPEC_3D, kalman_comparison, pipeline_gradcheck
from .config import load_config
from .core import TrajectoryDataset
from .experiment import evaluate_checkpoint, label_ratio_sweep, run_experiment, write_datasets

log = logging.getLogger("sdpf")


def _resolved(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        label_ratio=getattr(args, "label_ratio", None),
        lambda2=getattr(args, "lambda2", None),
    )


def cmd_generate(args) -> int:
    cfg = _resolved(args)
    hashes = write_datasets(cfg, args.out)
    for name, h in hashes.items():
        print(f"{name}: {Path(args.out) / (name + '.sdpf')} {h}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(args)
    result = run_experiment(cfg, args.out)
    rep = result.train_report
    print(f"best epoch {rep.best_epoch}, val rmse_last_step {rep.best_rmse:.4f}")
    print(f"test rmse {result.test_report.mean:.4f} +- {result.test_report.stderr:.4f}, "
          f"last step {result.test_last_step:.4f}")
    if rep.aborted:
        print(f"training aborted: {rep.aborted}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolved(args)
    dataset = TrajectoryDataset.load(args.dataset) if args.dataset else None
    report, last = evaluate_checkpoint(cfg, args.checkpoint, dataset, args.out)
    print(json.dumps({**report.to_dict(), "rmse_last_step": last}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolved(args)
    out = Path(args.out)
    rows = label_ratio_sweep(cfg, args.ratios, args.seeds, out / "sweep.csv", args.workers, out / "cells")
    cfg.dump(out / "config.yaml")
    for row in rows:
        print(f"{row['method']:>8} ratio={row['ratio']:g} seed={row['seed']} rmse={row['rmse_mean']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    report, n_resampled = pipeline_gradcheck(seed=args.seed or 0, tolerance=args.tolerance)
    summary = {"max_rel_error": report.max_rel_error, "worst_param": report.worst_param,
               "worst_index": report.worst_index, "n_entries": report.n_entries,
               "resampling_events": n_resampled, "tolerance": report.tolerance, "passed": report.passed}
    _maybe_write(args.out, "gradcheck.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0 if report.passed else 1


def cmd_oracle(args) -> int:
    specs = {"1d": LG_SPEC_1D, "3d": LG_SPEC_3D}
    names = list(specs) if args.dim == "all" else [args.dim]
    ok = True
    summary = {}
    for name in names:
        cmp = kalman_comparison(specs[name], args.particles, args.trajectories, args.steps, args.seed or 0,
                                args.tolerance)
        summary[name] = {"ratio": cmp.ratio.tolist(), "passed": cmp.passed}
        ok &= cmp.passed
        print(f"{name}: |PF - KF| / stationary std = {np.array2string(cmp.ratio, precision=4)} "
              f"({'pass' if cmp.passed else 'FAIL'})")
    _maybe_write(args.out, "oracle.json", summary)
    return 0 if ok else 1


def _maybe_write(out, name, payload) -> None:
    if out is None:
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdpf", description="Semi-supervised differentiable particle filters.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None, help="experiment YAML (defaults if omitted)")
        p.add_argument("--out", type=Path, required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("generate", help="write train/val/test datasets")
    common(p)
    p.add_argument("--label-ratio", type=float, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    common(p)
    p.add_argument("--label-ratio", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, default=None, help="dataset file (default: the config's test set)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="label-ratio sweep of SDPF against the supervised-only baseline")
    common(p)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.25, 0.5, 1.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lambda2", type=float, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="full-pipeline gradient check with frozen randomness")
    common(p, out_required=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="compare the particle filter with the Kalman filter")
    common(p, out_required=False)
    p.add_argument("--dim", choices=["1d", "3d", "all"], default="all")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
