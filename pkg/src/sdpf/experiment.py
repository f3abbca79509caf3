"""End-to-end runs: train and evaluate one configuration, and the label-ratio sweep."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .config import ExperimentConfig
from .core import TrajectoryDataset
from .metrics import MetricsReport, rmse_at_step, rmse_curve
from .train import TrainReport, evaluate, train

__all__ = [
    "SWEEP_COLUMNS",
    "RunResult",
    "content_hash",
    "write_datasets",
    "run_experiment",
    "evaluate_checkpoint",
    "sweep_cell",
    "label_ratio_sweep",
]

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["method", "ratio", "seed", "rmse_mean", "rmse_stderr"]


def content_hash(data: bytes) -> str:
    """Git blob hash (SHA-1 over ``b"blob <len>\\0"`` + content)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunResult:
    train_report: TrainReport
    test_report: MetricsReport
    test_last_step: float
    estimates: np.ndarray


def write_datasets(cfg: ExperimentConfig, out_dir) -> dict[str, str]:
    """Generate and save the train/val/test datasets; returns their content hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, ds in zip(("train", "val", "test"), cfg.datasets()):
        blob = ds.to_bytes()
        (out / f"{name}.sdpf").write_bytes(blob)
        hashes[name] = content_hash(blob)
    cfg.dump(out / "config.yaml")
    _write_manifest(out, cfg, hashes)
    return hashes


def _write_manifest(out: Path, cfg: ExperimentConfig, hashes: dict[str, str], extra: dict | None = None) -> None:
    from .config import SEED_KEYS

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "sub_seeds": {k: cfg.sub_seed(k) for k in SEED_KEYS},
        "dataset_hashes": hashes,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _test_outputs(cfg, model, params, train_set, test_set):
    heading = cfg.data["evaluation"]["heading_mode"]
    step = train_set.average_step_size()
    est, report, last = evaluate(model, params, test_set, cfg.filter_config(evaluation=True),
                                 cfg.sub_seed("eval"), step, heading)
    report.curve = rmse_curve(est, test_set.true_states, step, test_set.angular_mask, heading)
    report.at_steps = {t: rmse_at_step(est, test_set.true_states, t, step, test_set.angular_mask, heading)
                       for t in sorted({1, test_set.T // 2, test_set.T})}
    return est, report, float(np.mean(last))


def _write_test_files(out: Path, report: MetricsReport, last: float, est: np.ndarray) -> None:
    summary = {**report.to_dict(), "rmse_last_step": last,
               "at_steps": {str(t): float(np.mean(v)) for t, v in (report.at_steps or {}).items()}}
    (out / "test_metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "test_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "rmse"])
        writer.writerows((t + 1, repr(float(v))) for t, v in enumerate(report.curve))
    n, T, d = est.shape
    with open(out / "test_estimates.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trajectory", "t", *[f"est_{j}" for j in range(d)]])
        for i in range(n):
            for t in range(T):
                writer.writerow([i, t + 1, *[repr(float(v)) for v in est[i, t]]])


def run_experiment(cfg: ExperimentConfig, out_dir=None, datasets=None) -> RunResult:
    """Generate data, train, and evaluate on the held-out test set.

    With ``out_dir`` the resolved config, manifest, metrics CSV, best
    checkpoint and test outputs are written there.
    """
    train_set, val_set, test_set = datasets if datasets is not None else cfg.datasets()
    model = cfg.build_model(train_set)
    params = model.init_params()
    loss_cfg = cfg.loss_config()
    report = train(train_set, val_set, model, params, cfg.filter_config(), loss_cfg, cfg.optimizer_state(),
                   cfg.train_config(), eval_fcfg=cfg.filter_config(evaluation=True), out_dir=out_dir)
    est, test_report, last = _test_outputs(cfg, model, params, train_set, test_set)
    if out_dir is not None:
        out = Path(out_dir)
        cfg.dump(out / "config.yaml")
        hashes = {name: content_hash(ds.to_bytes()) for name, ds in
                  zip(("train", "val", "test"), (train_set, val_set, test_set))}
        _write_manifest(out, cfg, hashes, {
            "lambda2_used": report.lambda2,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs_run,
            "aborted": report.aborted,
        })
        _write_test_files(out, test_report, last, est)
    return RunResult(report, test_report, last, est)


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, dataset: TrajectoryDataset | None = None,
                        out_dir=None) -> tuple[MetricsReport, float]:
    """Evaluate saved parameters on ``dataset`` (default: the config's test set)."""
    train_set, _, test_set = cfg.datasets()
    dataset = test_set if dataset is None else dataset
    model = cfg.build_model(train_set)
    params = ParamStore.load(checkpoint)
    est, report, last = _test_outputs(cfg, model, params, train_set, dataset)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_test_files(out, report, last, est)
    return report, last


def sweep_cell(args) -> list[dict]:
    """Train SDPF and the supervised-only baseline for one (ratio, seed) cell."""
    base, ratio, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(base).with_overrides(seed=seed, label_ratio=ratio)
    datasets = cfg.datasets()
    rows = []
    for method, lam2 in (("sdpf", None), ("baseline", 0.0)):
        run_cfg = cfg.with_overrides(lambda2=lam2) if lam2 is not None else cfg
        if lam2 == 0.0:
            run_cfg.data["loss"]["auto_balance"] = False
        cell_dir = None if out_dir is None else Path(out_dir) / f"{method}_r{ratio:g}_s{seed}"
        result = run_experiment(run_cfg, cell_dir, datasets)
        rows.append({"method": method, "ratio": ratio, "seed": seed,
                     "rmse_mean": result.test_report.mean, "rmse_stderr": result.test_report.stderr})
        log.info("sweep cell %s ratio=%g seed=%d rmse=%.4f", method, ratio, seed, result.test_report.mean)
    return rows


def label_ratio_sweep(cfg: ExperimentConfig, ratios, seeds, out_csv, workers: int = 1, out_dir=None) -> list[dict]:
    """Every (ratio, seed) cell trains both methods; rows are flushed as cells finish, in cell order."""
    ratios, seeds = [float(r) for r in ratios], [int(s) for s in seeds]
    if not ratios or not seeds:
        raise ValueError("ratios and seeds must be nonempty")
    cells = [(cfg.to_dict(), r, s, out_dir) for r in ratios for s in seeds]
    rows: list[dict] = []
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        fh.flush()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(sweep_cell, cells)
                for cell_rows in results:
                    _emit(writer, fh, cell_rows, rows)
        else:
            for cell in cells:
                _emit(writer, fh, sweep_cell(cell), rows)
    return rows


def _emit(writer, fh, cell_rows, rows) -> None:
    for row in cell_rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        rows.append(row)
    fh.flush()
