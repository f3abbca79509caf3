"""Learnable dynamic and measurement models plus the fixed initial distribution.

All model functions operate on a batch of particle states (an ``N x D``
:class:`DiffValue`); a single state is the ``N = 1`` case.  Angular state
dimensions are fed to networks as ``(sin, cos)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ParamStore
from .core import ContractError, wrap_angle

__all__ = [
    "DegenerateFeatureError",
    "MlpSpec",
    "DynamicModelConfig",
    "MeasurementModelConfig",
    "InitialDistribution",
    "init_mlp",
    "mlp_forward",
    "state_features",
    "action_transform",
    "propagate_sample",
    "transition_log_density",
    "observation_encode",
    "state_encode",
    "measurement_log_likelihood",
    "expand_encoded",
    "initial_log_density",
    "StateSpaceModel",
    "LearnedModel",
]

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateFeatureError(FloatingPointError):
    """An encoder produced a (near) zero feature vector, so cosine distance is undefined."""


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0
    zero_output: bool = False
    # fixed input standardisation (x - shift) / scale; not trained
    input_shift: tuple[float, ...] | None = None
    input_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"MLP widths must have >= 2 entries, all >= 1: {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", widths)
        for name in ("input_shift", "input_scale"):
            value = getattr(self, name)
            if value is None:
                continue
            value = tuple(float(v) for v in value)
            if len(value) != widths[0]:
                raise ContractError(f"{name} has {len(value)} entries, input width is {widths[0]}")
            object.__setattr__(self, name, value)
        if self.input_scale is not None and min(self.input_scale) <= 0:
            raise ContractError("input_scale entries must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


def init_mlp(params: ParamStore, prefix: str, spec: MlpSpec) -> None:
    """Glorot-uniform weights, zero biases; optionally a zero output layer."""
    rng = np.random.default_rng(spec.seed)
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if spec.zero_output and k == spec.n_layers - 1:
            w = np.zeros_like(w)
        params.add(f"{prefix}/W{k}", w)
        params.add(f"{prefix}/b{k}", np.zeros(fan_out))


def mlp_forward(params: ParamStore, prefix: str, spec: MlpSpec, x) -> DiffValue:
    h = ad.constant(x)
    if h.shape[-1] != spec.widths[0]:
        raise ad.ShapeError(f"{prefix}: input width {h.shape[-1]} != {spec.widths[0]}")
    if spec.input_shift is not None or spec.input_scale is not None:
        shift = np.zeros(spec.widths[0]) if spec.input_shift is None else np.asarray(spec.input_shift)
        inv = np.ones(spec.widths[0]) if spec.input_scale is None else 1.0 / np.asarray(spec.input_scale)
        h = h * np.broadcast_to(inv, h.shape).copy() - np.broadcast_to(shift * inv, h.shape).copy()
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        act = spec.activation if k < last else None
        h = ad.dense(h, params[f"{prefix}/W{k}"], params[f"{prefix}/b{k}"], act)
    return h


def _as_batch(states) -> DiffValue:
    s = ad.constant(states)
    return ad.reshape(s, (1, s.shape[0])) if s.ndim == 1 else s


def state_feature_width(angular_mask, mode: str = "sincos") -> int:
    mask = np.asarray(angular_mask, dtype=bool)
    return mask.size + (int(mask.sum()) if mode == "sincos" else 0)


def state_features(states, angular_mask, mode: str = "sincos") -> DiffValue:
    """Network input for a batch of states (``raw`` or heading as ``(sin, cos)``)."""
    s = _as_batch(states)
    mask = np.asarray(angular_mask, dtype=bool)
    if mode == "raw" or not mask.any():
        return s
    if mode != "sincos":
        raise ContractError(f"unknown state feature mode {mode!r}")
    return ad.angle_features(s, mask)


@dataclass(frozen=True)
class DynamicModelConfig:
    noise_scales: tuple[float, ...]
    f_spec: MlpSpec
    state_feature_mode: str = "sincos"

    def __post_init__(self):
        scales = tuple(float(v) for v in self.noise_scales)
        if min(scales) <= 0:
            raise ContractError("dynamic noise scales must be positive")
        object.__setattr__(self, "noise_scales", scales)


@dataclass(frozen=True)
class MeasurementModelConfig:
    h_spec: MlpSpec
    hhat_spec: MlpSpec
    epsilon_c: float = 1e-6
    state_feature_mode: str = "sincos"

    def __post_init__(self):
        if self.h_spec.widths[-1] != self.hhat_spec.widths[-1]:
            raise ContractError("observation and state encoders must share the feature width")
        if self.epsilon_c <= 0:
            raise ContractError("epsilon_c must be positive")

    @property
    def feature_dim(self) -> int:
        return self.h_spec.widths[-1]

    @property
    def d_max(self) -> float:
        return 1.0 / self.epsilon_c


@dataclass(frozen=True)
class InitialDistribution:
    """Product distribution: each dimension is uniform on ``[a, b]`` or normal ``(a, b)``.

    Angular uniform dimensions should span ``(-pi, pi]``; angular normal
    dimensions measure the wrapped distance to the mean.
    """

    kinds: tuple[str, ...]
    a: tuple[float, ...]
    b: tuple[float, ...]
    angular_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        kinds = tuple(self.kinds)
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if not (len(kinds) == len(a) == len(b)):
            raise ContractError("initial distribution parameters differ in length")
        for k, lo, hi in zip(kinds, a, b):
            if k == "uniform" and not lo < hi:
                raise ContractError(f"uniform bounds out of order: {lo} >= {hi}")
            if k == "gaussian" and not hi > 0:
                raise ContractError("gaussian stddev must be positive")
            if k not in ("uniform", "gaussian"):
                raise ContractError(f"unknown kind {k!r}")
        mask = tuple(bool(m) for m in self.angular_mask) or (False,) * len(kinds)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "angular_mask", mask)

    @classmethod
    def uniform(cls, lower, upper, angular_mask=()) -> InitialDistribution:
        return cls(("uniform",) * len(lower), tuple(lower), tuple(upper), tuple(angular_mask))

    @classmethod
    def gaussian(cls, mean, std, angular_mask=()) -> InitialDistribution:
        return cls(("gaussian",) * len(mean), tuple(mean), tuple(std), tuple(angular_mask))

    @property
    def dim(self) -> int:
        return len(self.kinds)

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "a": list(self.a), "b": list(self.b),
                "angular_mask": list(self.angular_mask)}

    @classmethod
    def from_dict(cls, d: dict) -> InitialDistribution:
        return cls(tuple(d["kinds"]), tuple(d["a"]), tuple(d["b"]), tuple(d.get("angular_mask", ())))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.dim))
        for j, (k, lo, hi) in enumerate(zip(self.kinds, self.a, self.b)):
            if k == "uniform":
                out[:, j] = rng.uniform(lo, hi, size=n)
            else:
                out[:, j] = lo + hi * rng.standard_normal(n)
        mask = np.array(self.angular_mask)
        out[:, mask] = wrap_angle(out[:, mask])
        return out

    def log_density(self, states) -> DiffValue:
        """Per-state log-density; differentiable through Gaussian dimensions."""
        s = _as_batch(states)
        n = s.shape[0]
        total = np.zeros(n)
        gauss_cols = [j for j, k in enumerate(self.kinds) if k == "gaussian"]
        for j, (k, lo, hi) in enumerate(zip(self.kinds, self.a, self.b)):
            if k == "uniform":
                x = s.data[:, j]
                inside = (x >= lo) & (x <= hi)
                if self.angular_mask[j] and lo <= -math.pi + 1e-12 and hi >= math.pi - 1e-12:
                    inside = np.ones(n, dtype=bool)
                with np.errstate(divide="ignore"):
                    total = total + np.where(inside, -math.log(hi - lo), -np.inf)
            else:
                total = total - math.log(hi) - 0.5 * LOG_2PI
        if not gauss_cols:
            return DiffValue(total)
        sel = np.zeros((self.dim, len(gauss_cols)))
        for c, j in enumerate(gauss_cols):
            sel[j, c] = 1.0 / self.b[j]
        mean_row = np.array([self.a[j] / self.b[j] for j in gauss_cols])
        z = ad.matmul(s, sel) - np.broadcast_to(mean_row, (n, len(gauss_cols)))
        ang = np.array([self.angular_mask[j] for j in gauss_cols])
        if ang.any():
            scale = np.array([self.b[j] for j in gauss_cols])
            # wrap the unscaled angular offset, then rescale
            raw = z.data * scale
            offset = np.where(ang, wrap_angle(raw) - raw, 0.0) / scale
            z = z + np.broadcast_to(offset, z.shape).copy()
        return ad.sum(ad.square(z), axis=1) * -0.5 + total


def initial_log_density(dist: InitialDistribution, s):
    """Log-density of ``dist`` at a single state (float) or a batch (array)."""
    values = dist.log_density(s).data
    return float(values[0]) if np.ndim(s) == 1 else values


def _action_rows(action, n: int) -> np.ndarray:
    """One action row per state: a single action is repeated, a matrix is used as is."""
    a = np.asarray(action, dtype=np.float64)
    if a.ndim == 2:
        if a.shape[0] != n:
            raise ad.ShapeError(f"{a.shape[0]} action rows for {n} states")
        return a
    return np.broadcast_to(a, (n, a.size)).copy()


def _f_input(params, cfg: DynamicModelConfig, states: DiffValue, action, angular_mask) -> DiffValue:
    feats = state_features(states, angular_mask, cfg.state_feature_mode)
    return ad.concat([feats, _action_rows(action, feats.shape[0])], axis=1)


def action_transform(params: ParamStore, s, a, cfg: DynamicModelConfig, angular_mask) -> DiffValue:
    """Global-frame displacement ``f_theta(s, a)`` for each state row."""
    s = _as_batch(s)
    out = mlp_forward(params, "f", cfg.f_spec, _f_input(params, cfg, s, a, angular_mask))
    if out.shape[1] != s.shape[1]:
        raise ad.ShapeError(f"action transformer outputs {out.shape[1]} dims, state has {s.shape[1]}")
    return out


def _noise_term(noise, scales) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if not np.isfinite(noise).all():
        raise ContractError("non-finite reparameterisation noise")
    return noise * np.asarray(scales)


def propagate_sample(params, s, a, noise, cfg: DynamicModelConfig, angular_mask) -> DiffValue:
    """``s + f_theta(s, a) + diag(sigma) noise`` with angular dims wrapped."""
    s = _as_batch(s)
    mean = s + action_transform(params, s, a, cfg, angular_mask)
    nxt = mean + np.broadcast_to(_noise_term(noise, cfg.noise_scales), mean.shape).copy()
    return ad.wrap_offset(nxt, angular_mask)


def transition_log_density(params, s_next, s_prev, a, cfg: DynamicModelConfig, angular_mask) -> DiffValue:
    """``log N(s_next; s_prev + f_theta(s_prev, a), diag(sigma^2))`` per row."""
    s_prev = _as_batch(s_prev)
    mean = s_prev + action_transform(params, s_prev, a, cfg, angular_mask)
    delta = ad.wrap_offset(_as_batch(s_next) - mean, angular_mask)
    return ad.row_gaussian_log_density(delta, cfg.noise_scales)


def observation_encode(params, o, cfg: MeasurementModelConfig) -> DiffValue:
    o = np.asarray(o, dtype=np.float64)
    return mlp_forward(params, "h", cfg.h_spec, o)


def state_encode(params, s, cfg: MeasurementModelConfig, angular_mask) -> DiffValue:
    feats = state_features(s, angular_mask, cfg.state_feature_mode)
    return mlp_forward(params, "hhat", cfg.hhat_spec, feats)


def measurement_log_likelihood(params, s, e_obs: DiffValue, cfg: MeasurementModelConfig, angular_mask) -> DiffValue:
    """``-log(c + epsilon_c)`` with ``c`` the cosine distance between state and
    observation features; one value per state row.

    ``e_obs`` is one feature vector shared by all states, or one row per state.
    """
    e_state = state_encode(params, s, cfg, angular_mask)
    e_obs = ad.constant(e_obs)
    if e_obs.ndim == 1:
        e_obs = ad.gather(ad.reshape(e_obs, (1, e_obs.shape[0])), np.zeros(e_state.shape[0], dtype=np.intp))
    if min(np.min(np.linalg.norm(e_state.data, axis=1)), np.min(np.linalg.norm(e_obs.data, axis=1))) < 1e-12:
        raise DegenerateFeatureError("encoder produced a zero feature vector")
    cos_sim = ad.row_cosine(e_state, e_obs)
    return -ad.log((1.0 + cfg.epsilon_c) - cos_sim)


def expand_encoded(encoded, groups: np.ndarray):
    """Repeat per-trajectory encoded observations so each state row gets its own."""
    if isinstance(encoded, DiffValue):
        return ad.gather(encoded, groups)
    if isinstance(encoded, tuple):
        return tuple(None if e is None else expand_encoded(e, groups) for e in encoded)
    return np.asarray(encoded)[groups]


class StateSpaceModel:
    """Interface the particle filter consumes.

    Subclasses provide :meth:`predict_mean`, :meth:`encode_observation` and
    :meth:`log_likelihood`; propagation and the transition density follow from
    the additive Gaussian noise with per-dimension scales ``noise_scales``.
    """

    angular_mask: np.ndarray
    noise_scales: np.ndarray
    initial: InitialDistribution

    @property
    def state_dim(self) -> int:
        return len(self.angular_mask)

    def init_params(self) -> ParamStore:
        return ParamStore()

    def predict_mean(self, params, states: DiffValue, action) -> DiffValue:
        raise NotImplementedError

    def encode_observation(self, params, observation):
        raise NotImplementedError

    def log_likelihood(self, params, states: DiffValue, encoded) -> DiffValue:
        raise NotImplementedError

    def expand_encoded(self, encoded, groups: np.ndarray):
        return expand_encoded(encoded, groups)

    def propagate(self, params, states: DiffValue, action, noise) -> tuple[DiffValue, DiffValue]:
        """Returns ``(next_states, predicted_mean)``; the mean is unwrapped."""
        mean = self.predict_mean(params, states, action)
        nxt = mean + np.broadcast_to(_noise_term(noise, self.noise_scales), mean.shape).copy()
        return ad.wrap_offset(nxt, self.angular_mask), mean

    def transition_log_density(self, params, s_next, s_prev, action, mean: DiffValue | None = None) -> DiffValue:
        if mean is None:
            mean = self.predict_mean(params, _as_batch(s_prev), action)
        delta = ad.wrap_offset(_as_batch(s_next) - mean, self.angular_mask)
        return ad.row_gaussian_log_density(delta, self.noise_scales)

    def initial_log_density(self, states) -> DiffValue:
        return self.initial.log_density(states)


class LearnedModel(StateSpaceModel):
    """Action transformer, observation encoder and state encoder networks."""

    def __init__(
        self,
        dynamic: DynamicModelConfig,
        measurement: MeasurementModelConfig,
        initial: InitialDistribution,
        angular_mask,
    ):
        self.dynamic = dynamic
        self.measurement = measurement
        self.initial = initial
        self.angular_mask = np.asarray(angular_mask, dtype=bool)
        self.noise_scales = np.asarray(dynamic.noise_scales, dtype=np.float64)
        if self.noise_scales.size != self.angular_mask.size:
            raise ContractError("noise scales and state dimension differ")

    def with_noise_scales(self, scales) -> LearnedModel:
        dyn = DynamicModelConfig(tuple(scales), self.dynamic.f_spec, self.dynamic.state_feature_mode)
        return LearnedModel(dyn, self.measurement, self.initial, self.angular_mask)

    def init_params(self) -> ParamStore:
        params = ParamStore()
        init_mlp(params, "f", self.dynamic.f_spec)
        init_mlp(params, "h", self.measurement.h_spec)
        init_mlp(params, "hhat", self.measurement.hhat_spec)
        return params

    def predict_mean(self, params, states, action) -> DiffValue:
        states = _as_batch(states)
        return states + action_transform(params, states, action, self.dynamic, self.angular_mask)

    def encode_observation(self, params, observation) -> DiffValue:
        return observation_encode(params, observation, self.measurement)

    def log_likelihood(self, params, states, encoded) -> DiffValue:
        return measurement_log_likelihood(params, states, encoded, self.measurement, self.angular_mask)
