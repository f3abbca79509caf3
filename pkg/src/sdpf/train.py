"""Optimizers and the semi-supervised training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, PoisonedGradientError
from .core import ContractError, DegenerateWeightsError, TrajectoryDataset
from .filter import BatchFilterOutput, FilterConfig, NonFiniteBlockError, filter_forward_batch
from .metrics import rmse_at_step, rmse_scaled, summarize
from .models import DegenerateFeatureError, StateSpaceModel
from .objectives import LossConfig, batch_supervised_loss, combined_loss, pseudo_loglik

__all__ = [
    "OptimizerState",
    "TrainConfig",
    "TrainReport",
    "METRICS_COLUMNS",
    "optimizer_step",
    "clip_grad_norm",
    "derive_seed",
    "run_filter_batch",
    "evaluate",
    "train",
]

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "split", "loss_L", "loss_Q", "loss_total", "rmse_last_step", "wall_time"]


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "rmsprop"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")


def optimizer_step(opt: OptimizerState, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
    """In-place Adam or RMSProp update (RMSProp keeps ``eps`` inside the root)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise PoisonedGradientError(f"non-finite gradient for parameter {name!r}")
    opt.step_count += 1
    t = opt.step_count
    for name, p in params.items():
        g = grads[name]
        buf = opt.buffers.setdefault(name, {})
        if opt.kind == "adam":
            m = buf["m"] = opt.beta1 * buf.get("m", 0.0) + (1 - opt.beta1) * g
            v = buf["v"] = opt.beta2 * buf.get("v", 0.0) + (1 - opt.beta2) * g * g
            m_hat = m / (1 - opt.beta1**t)
            v_hat = v / (1 - opt.beta2**t)
            p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        else:
            ms = buf["ms"] = opt.decay * buf.get("ms", 0.0) + (1 - opt.decay) * g * g
            p.data = p.data - opt.lr * g / np.sqrt(ms + opt.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0:
        return grads, total
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}, total


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    val_every: int = 1
    patience: int | None = 10
    seed: int = 0
    clip_norm: float | None = 10.0
    log_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ContractError("epochs >= 0, batch_size >= 1, val_every >= 1 required")


@dataclass
class TrainReport:
    rows: list[dict]
    best_epoch: int
    best_rmse: float
    best_params: dict[str, np.ndarray]
    epochs_run: int
    aborted: str | None = None
    lambda2: float | None = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in METRICS_COLUMNS})
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_filter_batch(dataset: TrajectoryDataset, indices, params, model, fcfg: FilterConfig, seed: int,
                     track_blocks: bool = True) -> BatchFilterOutput:
    """Filter the trajectories ``indices`` of ``dataset`` together in one graph."""
    indices = [int(i) for i in indices]
    return filter_forward_batch([dataset[i] for i in indices], params, model, fcfg, indices, seed,
                                track_blocks=track_blocks)


def evaluate(model: StateSpaceModel, params: ParamStore, dataset: TrajectoryDataset, fcfg: FilterConfig,
             seed: int, step_sizes=None, heading_mode: str = "wrapped", chunk: int = 25):
    """Filter every trajectory without gradients; returns ``(estimates, report, last_step_rmse)``."""
    step = dataset.average_step_size() if step_sizes is None else np.asarray(step_sizes)
    parts = []
    with ad.no_grad():
        for c0 in range(0, len(dataset), chunk):
            idx = range(c0, min(c0 + chunk, len(dataset)))
            parts.append(run_filter_batch(dataset, idx, params, model, fcfg, seed, track_blocks=False).estimates_array())
    est = np.concatenate(parts)
    per_traj = rmse_scaled(est, dataset.true_states, step, dataset.angular_mask, heading_mode)
    last = rmse_at_step(est, dataset.true_states, dataset.T, step, dataset.angular_mask, heading_mode)
    return est, summarize(per_traj), last


def default_state_scales(dataset: TrajectoryDataset) -> np.ndarray:
    """Inverse squared average step size, so the supervised loss is a squared scaled error."""
    step = dataset.average_step_size()
    return np.where(step > 0, 1.0 / np.maximum(step, 1e-12) ** 2, 1.0)


def _batch_loss(train_set, batch, params, model, fcfg, loss_cfg, seed, scales):
    need_q = loss_cfg.lambda2 > 0 or loss_cfg.auto_balance
    out = run_filter_batch(train_set, batch, params, model, fcfg, seed, track_blocks=need_q)
    truth = None if train_set.true_states is None else train_set.true_states[batch]
    sup, _ = batch_supervised_loss(out, truth, train_set.label_mask[batch],
                                   train_set.angular_mask, scales)
    q = pseudo_loglik(out) if need_q else ad.DiffValue(0.0)
    return sup, q, combined_loss(sup, q, loss_cfg)


def train(
    train_set: TrajectoryDataset,
    val_set: TrajectoryDataset,
    model: StateSpaceModel,
    params: ParamStore,
    fcfg: FilterConfig,
    loss_cfg: LossConfig,
    opt: OptimizerState,
    cfg: TrainConfig,
    eval_fcfg: FilterConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainReport:
    """Shuffled mini-batch training with validation on last-step scaled RMSE.

    ``params`` is updated in place and left at the best validated values.
    """
    if len(train_set) < 1:
        raise ContractError("empty training set")
    if loss_cfg.lambda2 > 0 and fcfg.block_length > train_set.T:
        raise ContractError("block length exceeds trajectory length")
    eval_fcfg = eval_fcfg or fcfg
    scales = np.asarray(loss_cfg.state_scales) if loss_cfg.state_scales is not None else default_state_scales(train_set)
    val_step = val_set.average_step_size()
    val_seed = derive_seed(cfg.seed, 7_000_003)
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    start = time.perf_counter()
    rows: list[dict] = []
    timing: list[tuple[int, str, float]] = []

    def validate(epoch: int) -> float:
        _, _, last = evaluate(model, params, val_set, eval_fcfg, val_seed, val_step)
        value = float(np.mean(last))
        wall = time.perf_counter() - start
        timing.append((epoch, "val", wall))
        rows.append({"epoch": epoch, "split": "val", "rmse_last_step": value,
                     "wall_time": round(wall, 3) if cfg.log_wall_time else None})
        log.info("epoch %d val rmse_last_step %.4f", epoch, value)
        return value

    best_rmse = validate(0)
    best_epoch, best_params = 0, params.snapshot()
    since_best = 0
    aborted = None
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_seed = derive_seed(cfg.seed, 2, epoch)
        sums = np.zeros(3)
        n_batches = 0
        try:
            for b0 in range(0, len(order), cfg.batch_size):
                batch = order[b0 : b0 + cfg.batch_size]
                params.zero_grad()
                sup, q, loss = _batch_loss(train_set, batch, params, model, fcfg, loss_cfg, epoch_seed, scales)
                ad.backward(loss)
                grads, _ = clip_grad_norm(params.grads(), cfg.clip_norm)
                optimizer_step(opt, params, grads)
                sums += [float(sup.data), float(q.data), float(loss.data)]
                n_batches += 1
        except (PoisonedGradientError, DegenerateWeightsError, DegenerateFeatureError, NonFiniteBlockError) as exc:
            aborted = f"epoch {epoch}: {exc}"
            log.warning("training aborted: %s", aborted)
            break
        mean = sums / max(n_batches, 1)
        wall = time.perf_counter() - start
        timing.append((epoch, "train", wall))
        rows.append({"epoch": epoch, "split": "train", "loss_L": float(mean[0]), "loss_Q": float(mean[1]),
                     "loss_total": float(mean[2]), "wall_time": round(wall, 3) if cfg.log_wall_time else None})
        if epoch % cfg.val_every == 0:
            value = validate(epoch)
            if value < best_rmse:
                best_rmse, best_epoch, best_params = value, epoch, params.snapshot()
                since_best = 0
            else:
                since_best += 1
                if cfg.patience is not None and since_best >= cfg.patience:
                    break
    params.load_snapshot(best_params)
    report = TrainReport(rows, best_epoch, best_rmse, best_params, epoch if cfg.epochs else 0, aborted,
                         loss_cfg.lambda2)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.metrics_csv())
        with open(out / "timing.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "split", "wall_time"])
            writer.writerows(timing)
        params.save(out / "checkpoint_best.bin")
    return report
