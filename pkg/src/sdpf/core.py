"""Domain types shared across the package: particle sets, trajectory datasets, reductions."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DegenerateWeightsError",
    "ContractError",
    "wrap_angle",
    "angular_difference",
    "normalize_log_weights",
    "ParticleSet",
    "weighted_mean_estimate",
    "effective_sample_size",
    "Trajectory",
    "TrajectoryDataset",
    "NAV_ANGULAR_MASK",
]

NAV_ANGULAR_MASK = np.array([False, False, True])


class DegenerateWeightsError(FloatingPointError):
    """All weights vanished (or became NaN) at some time step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (time step {step})")
        self.step = step


class ContractError(ValueError):
    """A documented precondition on an argument does not hold."""


def wrap_angle(x):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2.0 * np.pi)


def angular_difference(a, b, angular_mask=None) -> np.ndarray:
    """``a - b`` with angular components wrapped into (-pi, pi]."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if angular_mask is None:
        return d
    mask = np.asarray(angular_mask, dtype=bool)
    return np.where(mask, wrap_angle(d), d)


def normalize_log_weights(log_weights, step: int | None = None) -> np.ndarray:
    """Shift log-weights so that their log-sum-exp is zero."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if np.isnan(lw).any() or not np.isfinite(lw).any() or np.isposinf(lw).any():
        raise DegenerateWeightsError("cannot normalise log-weights", step)
    return lw - logsumexp(lw)


def _check_normalized(log_weights: np.ndarray, tol: float = 1e-9) -> None:
    total = logsumexp(log_weights)
    if not abs(total) <= tol:
        raise ContractError(f"log-weights are not normalised (log-sum-exp = {total:.3e})")


@dataclass(frozen=True)
class ParticleSet:
    states: np.ndarray
    log_weights: np.ndarray
    time_index: int = 1
    angular_mask: np.ndarray | None = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        lw = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if states.shape[0] < 1 or states.shape[0] != lw.shape[0]:
            raise ContractError(f"{states.shape[0]} states but {lw.shape[0]} log-weights")
        if np.isposinf(lw).any():
            raise ContractError("log-weight of +inf")
        if self.time_index < 1:
            raise ContractError("time_index must be >= 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_weights", lw)
        if self.angular_mask is not None:
            object.__setattr__(self, "angular_mask", np.asarray(self.angular_mask, dtype=bool))

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def normalized(self) -> ParticleSet:
        return ParticleSet(
            self.states, normalize_log_weights(self.log_weights, self.time_index),
            self.time_index, self.angular_mask,
        )


def weighted_mean_estimate(particles: ParticleSet) -> np.ndarray:
    """Weighted particle mean; angular dimensions use the weighted circular mean."""
    _check_normalized(particles.log_weights)
    w = particles.weights
    est = w @ particles.states
    mask = particles.angular_mask
    if mask is not None and mask.any():
        ang = particles.states[:, mask]
        est[mask] = np.arctan2(w @ np.sin(ang), w @ np.cos(ang))
        est[mask] = wrap_angle(est[mask])
    return est


def effective_sample_size(particles: ParticleSet) -> float:
    _check_normalized(particles.log_weights)
    return float(np.exp(-logsumexp(2.0 * particles.log_weights)))


@dataclass
class Trajectory:
    """One trajectory; ``true_states`` rows outside the label mask are still stored
    (evaluation uses full truth), training code must only read masked rows."""

    observations: np.ndarray
    actions: np.ndarray
    true_states: np.ndarray | None
    label_mask: np.ndarray

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def labelled_steps(self) -> np.ndarray:
        return np.flatnonzero(self.label_mask)


_FIELDS = ("observations", "actions", "true_states", "label_mask")


@dataclass
class TrajectoryDataset:
    """Rectangular batch of trajectories: arrays shaped (n_traj, T, dim)."""

    observations: np.ndarray
    actions: np.ndarray
    true_states: np.ndarray | None
    label_mask: np.ndarray
    angular_mask: np.ndarray
    env_spec: dict = field(default_factory=dict)
    seed: int | None = None

    MAGIC = b"SDPFDATA"
    VERSION = 1

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        self.angular_mask = np.asarray(self.angular_mask, dtype=bool)
        n, T = self.observations.shape[:2]
        if self.actions.shape[:2] != (n, T) or self.label_mask.shape != (n, T):
            raise ContractError("observations, actions and label_mask disagree on (n_traj, T)")
        if self.true_states is None:
            if self.label_mask.any():
                raise ContractError("labelled steps without stored true states")
        else:
            self.true_states = np.asarray(self.true_states, dtype=np.float64)
            if self.true_states.shape[:2] != (n, T):
                raise ContractError("true_states disagree on (n_traj, T)")
            if self.true_states.shape[2] != self.angular_mask.shape[0]:
                raise ContractError("angular_mask length differs from state dimension")
        for name in ("observations", "actions", "true_states"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise ContractError(f"{name} contains non-finite entries")

    def __len__(self) -> int:
        return self.observations.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @property
    def state_dim(self) -> int:
        return self.angular_mask.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(
            self.observations[i], self.actions[i],
            None if self.true_states is None else self.true_states[i],
            self.label_mask[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> TrajectoryDataset:
        idx = np.asarray(indices, dtype=np.intp)
        return TrajectoryDataset(
            self.observations[idx], self.actions[idx],
            None if self.true_states is None else self.true_states[idx],
            self.label_mask[idx], self.angular_mask, dict(self.env_spec), self.seed,
        )

    def with_labels(self, label_mask) -> TrajectoryDataset:
        return TrajectoryDataset(
            self.observations, self.actions, self.true_states, label_mask,
            self.angular_mask, dict(self.env_spec), self.seed,
        )

    def average_step_size(self) -> np.ndarray:
        """Mean absolute per-step displacement of the true states, per dimension."""
        steps = angular_difference(self.true_states[:, 1:], self.true_states[:, :-1], self.angular_mask)
        return np.abs(steps).mean(axis=(0, 1))

    def to_bytes(self) -> bytes:
        columns = {
            "observations": self.observations.astype("<f8"),
            "actions": self.actions.astype("<f8"),
            "label_mask": self.label_mask.astype("u1"),
            "angular_mask": self.angular_mask.astype("u1"),
        }
        if self.true_states is not None:
            columns["true_states"] = self.true_states.astype("<f8")
        offset = 0
        layout = []
        for name, arr in columns.items():
            layout.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
        header = {
            "format": "sdpf-dataset",
            "version": self.VERSION,
            "columns": layout,
            "env_spec": self.env_spec,
            "seed": self.seed,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        body = b"".join(np.ascontiguousarray(a).tobytes() for a in columns.values())
        return self.MAGIC + struct.pack("<Q", len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> TrajectoryDataset:
        if raw[:8] != cls.MAGIC:
            raise ValueError("not a trajectory dataset file")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        if header.get("version") != cls.VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        base = 16 + hlen
        cols = {}
        for col in header["columns"]:
            dt = np.dtype(col["dtype"])
            count = int(np.prod(col["shape"]))
            cols[col["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=base + col["offset"]).reshape(col["shape"])
        return cls(
            cols["observations"].astype(np.float64),
            cols["actions"].astype(np.float64),
            cols["true_states"].astype(np.float64) if "true_states" in cols else None,
            cols["label_mask"].astype(bool),
            cols["angular_mask"].astype(bool),
            header.get("env_spec") or {},
            header.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> TrajectoryDataset:
        return cls.from_bytes(Path(path).read_bytes())

    def export_csv(self, path) -> None:
        """Long format: one row per (trajectory, step)."""
        n, T = self.label_mask.shape
        header = ["traj", "t", "labelled"]
        header += [f"obs_{j}" for j in range(self.observations.shape[2])]
        header += [f"act_{j}" for j in range(self.actions.shape[2])]
        if self.true_states is not None:
            header += [f"state_{j}" for j in range(self.true_states.shape[2])]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(n):
                for t in range(T):
                    row = [i, t + 1, int(self.label_mask[i, t])]
                    row += [repr(float(v)) for v in self.observations[i, t]]
                    row += [repr(float(v)) for v in self.actions[i, t]]
                    if self.true_states is not None:
                        row += [repr(float(v)) for v in self.true_states[i, t]]
                    writer.writerow(row)
