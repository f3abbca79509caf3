"""Synthetic environments, dataset generation, label masking and exact oracle models."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core import NAV_ANGULAR_MASK, ContractError, TrajectoryDataset, wrap_angle
from .models import LOG_2PI, InitialDistribution, StateSpaceModel, _as_batch

__all__ = [
    "LinearGaussianSpec",
    "BeaconWorldSpec",
    "KalmanResult",
    "generate_linear_gaussian",
    "kalman_oracle",
    "stationary_posterior_cov",
    "generate_beacon_world",
    "beacon_observation",
    "true_kinematics",
    "mask_labels",
    "LinearGaussianModel",
    "BeaconOracleModel",
    "beacon_stationary_distribution",
    "PRESETS",
]

# Dynamic-model settings for the maze and house navigation benchmarks.
PRESETS = {
    "maze": {
        "noise_scales": (20.0, 20.0, 0.5),
        "block_length": 20,
        "n_particles": 100,
        "optimizer": {"kind": "adam", "lr": 3e-4},
        "init": {"mode": "prior"},
    },
    "house3d": {
        "noise_scales": (0.04, 0.04, math.radians(5.0)),
        "block_length": 4,
        "n_particles": 30,
        "n_particles_test": 1000,
        "optimizer": {"kind": "rmsprop", "lr": 1e-4, "decay": 0.5},
        "init": {"mode": "truth", "std": (0.30, 0.30, math.radians(30.0))},
    },
}


def _derived_generators(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass(frozen=True)
class LinearGaussianSpec:
    A: tuple
    B: tuple
    C: tuple
    process_var: tuple
    obs_var: tuple
    init_mean: tuple
    init_var: tuple
    action_policy: str = "gaussian"
    action_scale: tuple = ()

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, tuple(tuple(float(v) for v in row) for row in getattr(self, name)))
        for name in ("process_var", "obs_var", "init_mean", "init_var", "action_scale"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        ds, da, do = self.state_dim, self.action_dim, self.obs_dim
        if self.mat("A").shape != (ds, ds) or self.mat("B").shape != (ds, da) or self.mat("C").shape != (do, ds):
            raise ContractError("inconsistent linear-Gaussian dimensions")
        if len(self.process_var) != ds or len(self.obs_var) != do or len(self.init_var) != ds:
            raise ContractError("noise variances have the wrong length")
        if min(self.process_var + self.obs_var) < 0 or min(self.init_var) <= 0:
            raise ContractError("variances must be nonnegative (initial variance positive)")
        if self.action_policy not in ("gaussian", "constant"):
            raise ContractError(f"unknown action policy {self.action_policy!r}")

    @property
    def state_dim(self) -> int:
        return len(self.A)

    @property
    def action_dim(self) -> int:
        return len(self.B[0])

    @property
    def obs_dim(self) -> int:
        return len(self.C)

    def mat(self, name: str) -> np.ndarray:
        return np.array(getattr(self, name), dtype=np.float64)

    def to_dict(self) -> dict:
        return {"kind": "linear_gaussian", **{k: (list(map(list, v)) if k in "ABC" else list(v))
                                               for k, v in asdict(self).items() if k != "action_policy"},
                "action_policy": self.action_policy}

    @classmethod
    def from_dict(cls, d: dict) -> LinearGaussianSpec:
        return cls(**{k: v for k, v in d.items() if k != "kind"})

    @classmethod
    def scalar(cls, a=0.9, q=1.0, r=1.0, m0=0.0, p0=1.0, b=1.0, action_scale=0.5) -> LinearGaussianSpec:
        return cls(((a,),), ((b,),), ((1.0,),), (q,), (r,), (m0,), (p0,), "gaussian", (action_scale,))


def _actions(spec: LinearGaussianSpec, rng: np.random.Generator, T: int) -> np.ndarray:
    scale = np.asarray(spec.action_scale) if spec.action_scale else np.ones(spec.action_dim)
    if spec.action_policy == "constant":
        return np.broadcast_to(scale, (T, spec.action_dim)).copy()
    return scale * rng.standard_normal((T, spec.action_dim))


def generate_linear_gaussian(spec: LinearGaussianSpec, T: int, n_traj: int, seed: int) -> TrajectoryDataset:
    if T < 2:
        raise ContractError("T must be >= 2")
    A, B, C = spec.mat("A"), spec.mat("B"), spec.mat("C")
    q, r = np.sqrt(spec.process_var), np.sqrt(spec.obs_var)
    ds, do = spec.state_dim, spec.obs_dim
    states = np.empty((n_traj, T, ds))
    obs = np.empty((n_traj, T, do))
    acts = np.empty((n_traj, T, spec.action_dim))
    for i, rng in enumerate(_derived_generators(seed, n_traj)):
        a = _actions(spec, rng, T)
        s = np.asarray(spec.init_mean) + np.sqrt(spec.init_var) * rng.standard_normal(ds)
        for t in range(T):
            if t > 0:
                s = A @ s + B @ a[t] + q * rng.standard_normal(ds)
            states[i, t] = s
            obs[i, t] = C @ s + r * rng.standard_normal(do)
        acts[i] = a
    return TrajectoryDataset(obs, acts, states, np.ones((n_traj, T), dtype=bool),
                             np.zeros(ds, dtype=bool), spec.to_dict(), seed)


@dataclass
class KalmanResult:
    means: np.ndarray
    covs: np.ndarray


def kalman_oracle(spec: LinearGaussianSpec, traj, update_first: bool = False) -> KalmanResult:
    """Exact filtering posteriors.  By default step 1 is the prior (no update),
    matching a particle filter that starts from uniform weights."""
    A, B, C = spec.mat("A"), spec.mat("B"), spec.mat("C")
    Q, R = np.diag(spec.process_var), np.diag(spec.obs_var)
    m, P = np.asarray(spec.init_mean, dtype=np.float64), np.diag(spec.init_var)
    T = traj.observations.shape[0]
    I = np.eye(spec.state_dim)
    means, covs = np.empty((T, spec.state_dim)), np.empty((T, spec.state_dim, spec.state_dim))
    for t in range(T):
        if t > 0:
            m = A @ m + B @ traj.actions[t]
            P = A @ P @ A.T + Q
        if t > 0 or update_first:
            S = C @ P @ C.T + R
            if np.linalg.cond(S) > 1e14:
                raise np.linalg.LinAlgError(f"innovation covariance is singular at step {t + 1}")
            K = np.linalg.solve(S, C @ P).T
            m = m + K @ (traj.observations[t] - C @ m)
            P = (I - K @ C) @ P @ (I - K @ C).T + K @ R @ K.T
        means[t], covs[t] = m, P
    return KalmanResult(means, covs)


def stationary_posterior_cov(spec: LinearGaussianSpec, tol: float = 1e-13, max_iter: int = 100000) -> np.ndarray:
    """Fixed point of the filtering Riccati recursion."""
    A, C = spec.mat("A"), spec.mat("C")
    Q, R = np.diag(spec.process_var), np.diag(spec.obs_var)
    P = np.diag(spec.init_var)
    for _ in range(max_iter):
        Pp = A @ P @ A.T + Q
        K = np.linalg.solve(C @ Pp @ C.T + R, C @ Pp).T
        P_new = Pp - K @ C @ Pp
        if np.max(np.abs(P_new - P)) < tol:
            return P_new
        P = P_new
    return P


class LinearGaussianModel(StateSpaceModel):
    """The exact densities of a :class:`LinearGaussianSpec`, as a filter model."""

    def __init__(self, spec: LinearGaussianSpec):
        if min(spec.process_var) <= 0 or min(spec.obs_var) <= 0:
            raise ContractError("the filter model needs positive noise variances")
        self.spec = spec
        self.A, self.B, self.C = spec.mat("A"), spec.mat("B"), spec.mat("C")
        self.angular_mask = np.zeros(spec.state_dim, dtype=bool)
        self.noise_scales = np.sqrt(spec.process_var)
        self.obs_scales = np.sqrt(spec.obs_var)
        self.initial = InitialDistribution.gaussian(spec.init_mean, np.sqrt(spec.init_var))

    def predict_mean(self, params, states, action) -> DiffValue:
        s = _as_batch(states)
        drift = np.broadcast_to(np.asarray(action, dtype=np.float64) @ self.B.T, s.shape).copy()
        return ad.matmul(s, self.A.T) + drift

    def encode_observation(self, params, observation):
        return np.asarray(observation, dtype=np.float64)

    def log_likelihood(self, params, states, encoded) -> DiffValue:
        s = _as_batch(states)
        pred = ad.matmul(s, self.C.T)
        delta = np.broadcast_to(encoded, pred.shape).copy() - pred
        return ad.row_gaussian_log_density(delta, self.obs_scales)


@dataclass(frozen=True)
class BeaconWorldSpec:
    arena: tuple[float, float, float, float] = (0.0, 10.0, 0.0, 10.0)
    beacons: tuple[tuple[float, float], ...] = ((0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0))
    observation_kind: str = "range_bearing"
    range_std: float = 0.3
    bearing_std: float = 0.1
    odometry_std: tuple[float, float, float] = (0.05, 0.05, 0.02)
    speed_range: tuple[float, float] = (0.2, 0.6)
    turn_std: float = 0.3
    start_margin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "arena", tuple(float(v) for v in self.arena))
        object.__setattr__(self, "beacons", tuple(tuple(float(v) for v in b) for b in self.beacons))
        object.__setattr__(self, "odometry_std", tuple(float(v) for v in self.odometry_std))
        x0, x1, y0, y1 = self.arena
        if not (x0 < x1 and y0 < y1):
            raise ContractError("arena bounds out of order")
        if len(self.beacons) < 1:
            raise ContractError("need at least one beacon")
        for bx, by in self.beacons:
            if not (x0 <= bx <= x1 and y0 <= by <= y1):
                raise ContractError(f"beacon ({bx}, {by}) outside the arena")
        if self.observation_kind not in ("range", "range_bearing"):
            raise ContractError(f"unknown observation kind {self.observation_kind!r}")
        if self.range_std <= 0 or self.bearing_std <= 0 or min(self.odometry_std) <= 0:
            raise ContractError("noise levels must be positive")

    @property
    def n_beacons(self) -> int:
        return len(self.beacons)

    @property
    def obs_dim(self) -> int:
        return self.n_beacons * (3 if self.observation_kind == "range_bearing" else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beacons"] = [list(b) for b in self.beacons]
        return {"kind": "beacon_world", **d}

    @classmethod
    def from_dict(cls, d: dict) -> BeaconWorldSpec:
        d = {k: v for k, v in d.items() if k != "kind"}
        for key in ("arena", "odometry_std", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "beacons" in d:
            d["beacons"] = tuple(tuple(b) for b in d["beacons"])
        return cls(**d)


def true_kinematics(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Apply local-frame odometry ``(forward, lateral, turn)`` to poses ``(x, y, heading)``."""
    s = np.atleast_2d(states)
    a = np.atleast_2d(actions)
    c, sn = np.cos(s[:, 2]), np.sin(s[:, 2])
    out = np.empty_like(s, dtype=np.float64)
    out[:, 0] = s[:, 0] + c * a[:, 0] - sn * a[:, 1]
    out[:, 1] = s[:, 1] + sn * a[:, 0] + c * a[:, 1]
    out[:, 2] = wrap_angle(s[:, 2] + a[:, 2])
    return out if np.ndim(states) == 2 else out[0]


def beacon_observation(spec: BeaconWorldSpec, pose, rng: np.random.Generator | None = None) -> np.ndarray:
    """Ranges, then (sin, cos) of robot-relative bearings when configured."""
    b = np.asarray(spec.beacons)
    dx, dy = b[:, 0] - pose[0], b[:, 1] - pose[1]
    ranges = np.hypot(dx, dy)
    if rng is not None:
        ranges = ranges + spec.range_std * rng.standard_normal(ranges.size)
    if spec.observation_kind == "range":
        return ranges
    bearing = np.arctan2(dy, dx) - pose[2]
    if rng is not None:
        bearing = bearing + spec.bearing_std * rng.standard_normal(bearing.size)
    return np.concatenate([ranges, np.sin(bearing), np.cos(bearing)])


def _inside(spec: BeaconWorldSpec, x: float, y: float) -> bool:
    x0, x1, y0, y1 = spec.arena
    return x0 <= x <= x1 and y0 <= y <= y1


def _simulate_beacon(spec: BeaconWorldSpec, T: int, rng: np.random.Generator):
    x0, x1, y0, y1 = spec.arena
    m = spec.start_margin
    pose = np.array([rng.uniform(x0 + m, x1 - m), rng.uniform(y0 + m, y1 - m), rng.uniform(-np.pi, np.pi)])
    states, acts, obs = np.empty((T, 3)), np.zeros((T, 3)), np.empty((T, spec.obs_dim))
    odo = np.asarray(spec.odometry_std)
    for t in range(T):
        if t > 0:
            u = np.array([rng.uniform(*spec.speed_range), 0.0, spec.turn_std * rng.standard_normal()])
            nxt = true_kinematics(pose, u)
            if not _inside(spec, nxt[0], nxt[1]):
                # bounce: stay put and turn towards the arena centre
                centre = np.arctan2((y0 + y1) / 2 - pose[1], (x0 + x1) / 2 - pose[0])
                u = np.array([0.0, 0.0, wrap_angle(centre - pose[2] + 0.5 * rng.standard_normal())])
                nxt = true_kinematics(pose, u)
            pose = nxt
            acts[t] = u + odo * rng.standard_normal(3)
        states[t] = pose
        obs[t] = beacon_observation(spec, pose, rng)
    return states, acts, obs


def generate_beacon_world(spec: BeaconWorldSpec, T: int, n_traj: int, seed: int) -> TrajectoryDataset:
    """Random-walk robot; actions are noisy odometry of the true local-frame motion."""
    if T < 2:
        raise ContractError("T must be >= 2")
    states = np.empty((n_traj, T, 3))
    acts = np.empty((n_traj, T, 3))
    obs = np.empty((n_traj, T, spec.obs_dim))
    for i, rng in enumerate(_derived_generators(seed, n_traj)):
        states[i], acts[i], obs[i] = _simulate_beacon(spec, T, rng)
    return TrajectoryDataset(obs, acts, states, np.ones((n_traj, T), dtype=bool),
                             NAV_ANGULAR_MASK.copy(), spec.to_dict(), seed)


def beacon_stationary_distribution(spec: BeaconWorldSpec) -> InitialDistribution:
    """Broad Gaussian over the arena in position, uniform heading."""
    x0, x1, y0, y1 = spec.arena
    return InitialDistribution(
        ("gaussian", "gaussian", "uniform"),
        ((x0 + x1) / 2, (y0 + y1) / 2, -math.pi),
        ((x1 - x0) / 2, (y1 - y0) / 2, math.pi),
        tuple(NAV_ANGULAR_MASK),
    )


class BeaconOracleModel(StateSpaceModel):
    """True kinematics and the exact Gaussian range(-bearing) likelihood.

    Evaluated in plain numpy; it holds no parameters and builds no gradients.
    """

    def __init__(self, spec: BeaconWorldSpec, noise_scales=None, initial: InitialDistribution | None = None):
        self.spec = spec
        self.angular_mask = NAV_ANGULAR_MASK.copy()
        self.noise_scales = np.asarray(noise_scales if noise_scales is not None else spec.odometry_std, dtype=np.float64)
        self.initial = initial or beacon_stationary_distribution(spec)
        self._beacons = np.asarray(spec.beacons)

    def predict_mean(self, params, states, action) -> DiffValue:
        s = _as_batch(states).data
        a = np.broadcast_to(np.asarray(action, dtype=np.float64), s.shape)
        mean = true_kinematics(s, a)
        # keep the heading unwrapped relative to the previous state
        mean[:, 2] = s[:, 2] + a[:, 2]
        return DiffValue(mean)

    def encode_observation(self, params, observation):
        o = np.asarray(observation, dtype=np.float64)
        K = self.spec.n_beacons
        ranges = o[..., :K]
        if self.spec.observation_kind == "range":
            return ranges, None
        return ranges, np.arctan2(o[..., K : 2 * K], o[..., 2 * K : 3 * K])

    def log_likelihood(self, params, states, encoded) -> DiffValue:
        s = _as_batch(states).data
        ranges, bearings = encoded
        dx = self._beacons[None, :, 0] - s[:, 0:1]
        dy = self._beacons[None, :, 1] - s[:, 1:2]
        K = self.spec.n_beacons
        zr = (np.atleast_2d(ranges) - np.hypot(dx, dy)) / self.spec.range_std
        ll = -0.5 * np.sum(zr * zr, axis=1) - K * (math.log(self.spec.range_std) + 0.5 * LOG_2PI)
        if bearings is not None:
            zb = wrap_angle(np.atleast_2d(bearings) - (np.arctan2(dy, dx) - s[:, 2:3])) / self.spec.bearing_std
            ll = ll - 0.5 * np.sum(zb * zb, axis=1) - K * (math.log(self.spec.bearing_std) + 0.5 * LOG_2PI)
        return DiffValue(ll)


def mask_labels(dataset: TrajectoryDataset, ratio: float, seed: int) -> TrajectoryDataset:
    """Keep labels at ``floor(ratio * T)`` uniformly chosen steps of each trajectory."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError("label ratio must lie in [0, 1]")
    n, T = len(dataset), dataset.T
    count = int(math.floor(ratio * T + 1e-9))
    mask = np.zeros((n, T), dtype=bool)
    for i, rng in enumerate(_derived_generators(seed, n)):
        mask[i, rng.choice(T, size=count, replace=False)] = True
    return dataset.with_labels(mask)
