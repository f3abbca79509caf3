"""Scaled RMSE metrics and summary statistics across trajectories."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import ContractError, angular_difference

__all__ = ["MetricsReport", "rmse_scaled", "rmse_at_step", "rmse_curve", "summarize"]


def _scaled_errors(estimates, truths, step_sizes, angular_mask, heading_mode: str) -> np.ndarray:
    """Per-step, per-dimension errors divided by the step size; excluded dims dropped."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ContractError(f"estimates {est.shape} and truths {tru.shape} differ")
    step = np.asarray(step_sizes, dtype=np.float64)
    mask = np.zeros(est.shape[-1], dtype=bool) if angular_mask is None else np.asarray(angular_mask, dtype=bool)
    if heading_mode not in ("wrapped", "exclude"):
        raise ContractError(f"unknown heading mode {heading_mode!r}")
    keep = step > 0
    if not keep.all():
        warnings.warn(f"dimensions {np.flatnonzero(~keep).tolist()} have zero step size; excluded",
                      RuntimeWarning, stacklevel=3)
    if heading_mode == "exclude":
        keep &= ~mask
    err = angular_difference(est, tru, mask)
    return err[..., keep] / step[keep]


def rmse_scaled(estimates, truths, step_sizes, angular_mask=None, heading_mode: str = "wrapped",
                per_dimension: bool = False) -> np.ndarray:
    """Scaled RMSE of each trajectory.

    ``estimates`` and ``truths`` are ``(n_traj, T, D)`` (or ``(T, D)``).  Each
    dimension's RMSE over time is divided by that dimension's average step
    size; the result is the root-mean over dimensions, or the per-dimension
    values when ``per_dimension`` is set.
    """
    z = _scaled_errors(estimates, truths, step_sizes, angular_mask, heading_mode)
    per_dim = np.sqrt(np.mean(z * z, axis=-2))
    if per_dimension:
        return per_dim
    return np.sqrt(np.mean(per_dim * per_dim, axis=-1))


def rmse_at_step(estimates, truths, t: int, step_sizes, angular_mask=None, heading_mode: str = "wrapped") -> np.ndarray:
    """Scaled RMSE restricted to the 1-based time step ``t``."""
    est = np.asarray(estimates)
    T = est.shape[-2]
    if not 1 <= t <= T:
        raise ContractError(f"time step {t} outside 1..{T}")
    tru = np.asarray(truths)
    return rmse_scaled(est[..., t - 1 : t, :], tru[..., t - 1 : t, :], step_sizes, angular_mask, heading_mode)


def rmse_curve(estimates, truths, step_sizes, angular_mask=None, heading_mode: str = "wrapped") -> np.ndarray:
    """Scaled error at each step, root-mean over dimensions and trajectories."""
    z = _scaled_errors(estimates, truths, step_sizes, angular_mask, heading_mode)
    z = z.reshape(-1, *z.shape[-2:])
    return np.sqrt(np.mean(z * z, axis=(0, 2)))


@dataclass
class MetricsReport:
    per_trajectory: np.ndarray
    mean: float
    stderr: float
    quantiles: tuple[float, float, float, float, float]
    curve: np.ndarray | None = None
    at_steps: dict[int, np.ndarray] | None = None

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "min": self.quantiles[0], "q1": self.quantiles[1], "median": self.quantiles[2],
            "q3": self.quantiles[3], "max": self.quantiles[4],
            "n": int(self.per_trajectory.size),
        }


def _sorted_quantile(sorted_values: np.ndarray, p: float) -> float:
    """Linear interpolation between order statistics at position ``p (n - 1)``."""
    pos = p * (sorted_values.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, sorted_values.size - 1)
    frac = pos - lo
    return float(sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac)


def summarize(values, curve=None, at_steps=None) -> MetricsReport:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    stderr = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    q = [_sorted_quantile(np.sort(v), p) for p in (0.0, 0.25, 0.5, 0.75, 1.0)]
    return MetricsReport(v, float(v.mean()), stderr, tuple(float(x) for x in q), curve, at_steps)
