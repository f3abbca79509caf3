"""Differentiable bootstrap particle filter with block pseudo-likelihood accumulation.

:func:`filter_forward_batch` runs the filter over several trajectories at
once and builds a single backward graph; :func:`filter_forward` is the
one-trajectory case.  Particle states are stacked as ``(B * N) x D`` rows
(trajectory ``b`` owns rows ``b * N .. b * N + N - 1``) and log-weights are
``B x N``.  Resampling truncates gradients: ancestor indices are constants
and the reset weights are constants, while resampled states keep their
gradient path through the gather.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ParamStore
from .core import ContractError, DegenerateWeightsError, ParticleSet, normalize_log_weights
from .models import StateSpaceModel, _action_rows

__all__ = [
    "FilterConfig",
    "InitProtocol",
    "RandomStreams",
    "StepRecord",
    "EventLog",
    "BlockAccumulator",
    "FilterState",
    "FilterOutput",
    "BatchFilterOutput",
    "NonFiniteBlockError",
    "draw_ancestors",
    "resample_multinomial",
    "filter_step",
    "filter_forward",
    "filter_forward_batch",
    "recompute_q_sum",
]

_NOISE, _ANCESTORS, _INIT = 0, 1, 2


class NonFiniteBlockError(FloatingPointError):
    """A lineage's block log-density became non-finite (e.g. a state left the support of mu)."""


@dataclass(frozen=True)
class InitProtocol:
    """How the particle cloud is initialised.

    ``prior`` samples the model's initial distribution; ``truth`` samples a
    Gaussian centred on the true first state with per-dimension ``std``.
    """

    mode: str = "prior"
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("prior", "truth"):
            raise ContractError(f"unknown init mode {self.mode!r}")
        if self.mode == "truth" and (self.std is None or min(self.std) <= 0):
            raise ContractError("truth initialisation needs positive std")


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 100
    resample_threshold: float | None = None
    block_length: int = 20
    seed: int = 0
    resample_mode: str = "multinomial"
    init: InitProtocol = field(default_factory=InitProtocol)

    def __post_init__(self):
        if self.n_particles < 1:
            raise ContractError("n_particles must be >= 1")
        if self.block_length < 1:
            raise ContractError("block_length must be >= 1")
        if self.resample_mode != "multinomial":
            raise ContractError("only multinomial resampling is implemented")
        if not 0 <= self.threshold <= self.n_particles:
            raise ContractError("resample threshold must lie in [0, n_particles]")

    @property
    def threshold(self) -> float:
        if self.resample_threshold is None:
            return self.n_particles / 2.0
        return float(self.resample_threshold)


class RandomStreams:
    """Counter-based (Philox) substreams keyed by (trajectory, step, purpose).

    Any step's draws can be regenerated in isolation; particle ``i`` always
    uses row ``i`` of its step's draw.
    """

    def __init__(self, seed: int, trajectory: int = 0):
        self.seed = int(seed)
        self.trajectory = int(trajectory)

    def generator(self, step: int, purpose: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.trajectory, int(step), int(purpose)))
        return np.random.Generator(np.random.Philox(ss))

    def noise(self, step: int, n: int, d: int) -> np.ndarray:
        return self.generator(step, _NOISE).standard_normal((n, d))

    def uniforms(self, step: int, n: int) -> np.ndarray:
        return self.generator(step, _ANCESTORS).random(n)

    def init_generator(self) -> np.random.Generator:
        return self.generator(1, _INIT)


def draw_ancestors(log_weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF multinomial draw: ``P(A_i = j) = w_j`` independently for each ``i``."""
    w = np.exp(np.asarray(log_weights) - np.max(log_weights))
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, uniforms, side="right"), len(w) - 1).astype(np.intp)


def resample_multinomial(particles: ParticleSet, rng: np.random.Generator) -> tuple[np.ndarray, ParticleSet]:
    lw = normalize_log_weights(particles.log_weights, particles.time_index)
    n = particles.n_particles
    ancestors = draw_ancestors(lw, rng.random(n))
    out = ParticleSet(
        particles.states[ancestors], np.full(n, -np.log(n)), particles.time_index, particles.angular_mask
    )
    return ancestors, out


@dataclass
class StepRecord:
    """Per-step numeric trace used for diagnostics and replay."""

    k: int
    ess: float
    resampled: bool
    ancestors: np.ndarray | None
    log_weights: np.ndarray
    log_lik: np.ndarray
    log_trans: np.ndarray | None = None
    log_mu: np.ndarray | None = None
    noise_stream: tuple[int, int, int] | None = None


@dataclass
class EventLog:
    seed: int
    trajectory: int
    steps: list[StepRecord] = field(default_factory=list)

    def replay_ancestors(self) -> dict[int, np.ndarray | None]:
        return {r.k: r.ancestors for r in self.steps if r.k >= 2}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trajectory": self.trajectory,
            "steps": [
                {"k": r.k, "resampled": r.resampled,
                 "ancestors": None if r.ancestors is None else r.ancestors.tolist(),
                 "noise_stream": None if r.noise_stream is None else list(r.noise_stream)}
                for r in self.steps
            ],
        }

    def save_replay(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @staticmethod
    def load_replay(path) -> dict[int, np.ndarray | None]:
        blob = json.loads(Path(path).read_text())
        return {
            s["k"]: None if s["ancestors"] is None else np.asarray(s["ancestors"], dtype=np.intp)
            for s in blob["steps"] if s["k"] >= 2
        }


@dataclass
class BlockAccumulator:
    """Running per-lineage log eta over the current block and the per-trajectory Q sums.

    ``log_eta`` holds one entry per particle row; ``q_sum`` one entry per
    trajectory in the batch.
    """

    block_length: int
    batch_size: int = 1
    log_eta: DiffValue | None = None
    block_index: int = 0
    blocks_completed: int = 0
    q_sum: DiffValue | None = None

    def __post_init__(self):
        if self.q_sum is None:
            self.q_sum = DiffValue(np.zeros(self.batch_size))

    def is_block_start(self, k: int) -> bool:
        return (k - 1) % self.block_length == 0

    def closes_block(self, k: int) -> bool:
        return k % self.block_length == 0

    def reindex(self, ancestors: np.ndarray) -> None:
        if self.log_eta is not None:
            self.log_eta = ad.gather(self.log_eta, ancestors)

    def start(self, terms: DiffValue) -> None:
        self.log_eta = terms

    def extend(self, terms: DiffValue) -> None:
        self.log_eta = terms if self.log_eta is None else self.log_eta + terms

    def close(self, log_weights: DiffValue) -> None:
        """Add ``sum_i w_i log eta_i`` for each trajectory; ``log_weights`` is ``B x N``."""
        if not np.isfinite(self.log_eta.data).all():
            raise NonFiniteBlockError(f"non-finite block log-density in block {self.block_index}")
        lw = log_weights if log_weights.ndim == 2 else ad.reshape(log_weights, (1, log_weights.shape[0]))
        eta = ad.reshape(self.log_eta, lw.shape)
        self.q_sum = self.q_sum + ad.sum(ad.exp(lw) * eta, axis=1)
        self.block_index += 1
        self.blocks_completed += 1
        self.log_eta = None


@dataclass
class FilterState:
    states: DiffValue
    log_weights: DiffValue
    k: int

    @property
    def batch_size(self) -> int:
        return self.log_weights.shape[0]

    @property
    def n_particles(self) -> int:
        return self.log_weights.shape[1]


@dataclass
class FilterOutput:
    """One trajectory's filtering result.  ``estimates`` is ``T x D``."""

    estimates: DiffValue
    ess: np.ndarray
    resampled: np.ndarray
    q_sum: DiffValue
    blocks_completed: int
    events: EventLog
    clouds: list[tuple[np.ndarray, np.ndarray]] | None = None

    def estimates_array(self) -> np.ndarray:
        return self.estimates.data

    def export_csv(self, path) -> None:
        est = self.estimates.data
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *[f"est_{j}" for j in range(est.shape[1])], "ess", "resampled"])
            for t in range(est.shape[0]):
                writer.writerow([t + 1, *[repr(float(v)) for v in est[t]], repr(float(self.ess[t])),
                                 int(self.resampled[t])])


@dataclass
class BatchFilterOutput:
    """Result for ``B`` trajectories filtered together.

    ``estimates`` is ``(T * B) x D`` with row ``t * B + b`` holding trajectory
    ``b`` at step ``t + 1``; ``q_sum`` has one entry per trajectory.  Clouds,
    when kept, are ``((B * N) x D states, B x N log-weights)`` per step.
    """

    estimates: DiffValue
    ess: np.ndarray
    resampled: np.ndarray
    q_sum: DiffValue
    blocks_completed: int
    events: list[EventLog]
    clouds: list[tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def batch_size(self) -> int:
        return len(self.events)

    def estimates_array(self) -> np.ndarray:
        """Estimates as a ``B x T x D`` array."""
        B = self.batch_size
        est = self.estimates.data
        return est.reshape(est.shape[0] // B, B, est.shape[1]).transpose(1, 0, 2)

    def row_index(self, b: int, steps) -> np.ndarray:
        """Rows of :attr:`estimates` for trajectory ``b`` at 0-based ``steps``."""
        return np.asarray(steps, dtype=np.intp) * self.batch_size + b


def _normalize(log_w: DiffValue, k: int) -> DiffValue:
    data = log_w.data
    if np.isnan(data).any() or not np.isfinite(data).any(axis=-1).all():
        raise DegenerateWeightsError("all particle weights vanished", k)
    return ad.log_normalize(log_w)


def _row_ess(lw: np.ndarray) -> np.ndarray:
    m = np.max(2.0 * lw, axis=1, keepdims=True)
    return np.exp(-(np.log(np.exp(2.0 * lw - m).sum(axis=1)) + m[:, 0]))


def filter_step(
    state: FilterState,
    observation,
    action,
    params: ParamStore,
    model: StateSpaceModel,
    config: FilterConfig,
    streams: RandomStreams | list[RandomStreams],
    acc: BlockAccumulator | None,
    replay=None,
) -> tuple[FilterState, list[StepRecord]]:
    """Advance from step ``k - 1`` to ``k``: resample if needed, propagate, reweight, accumulate.

    ``observation`` and ``action`` carry one row per trajectory (a 1-D vector
    is accepted for a single trajectory); ``streams`` and ``replay`` are lists
    with one entry per trajectory, or single items when ``B = 1``.
    """
    k = state.k + 1
    B, n = state.batch_size, state.n_particles
    if isinstance(streams, RandomStreams):
        streams = [streams]
    if replay is not None and isinstance(replay, dict):
        replay = [replay]
    obs = np.atleast_2d(np.asarray(observation, dtype=np.float64))
    act = np.atleast_2d(np.asarray(action, dtype=np.float64))
    lw_prev = state.log_weights.data
    ess = _row_ess(lw_prev)

    ancestors: list[np.ndarray | None] = []
    for b in range(B):
        if replay is not None:
            ancestors.append(replay[b].get(k))
        elif ess[b] < config.threshold:
            ancestors.append(draw_ancestors(lw_prev[b], streams[b].uniforms(k, n)))
        else:
            ancestors.append(None)

    resampled = np.array([a is not None for a in ancestors])
    if resampled.any():
        idx = np.concatenate([
            b * n + (np.arange(n) if a is None else np.asarray(a, dtype=np.intp)) for b, a in enumerate(ancestors)
        ])
        prev_states = ad.gather(state.states, idx)
        reset = np.repeat(resampled[:, None], n, axis=1)
        log_w = ad.where(reset, np.full((B, n), -np.log(n)), state.log_weights)
        if acc is not None:
            acc.reindex(idx)
    else:
        prev_states = state.states
        log_w = state.log_weights

    groups = np.repeat(np.arange(B), n)
    action_rows = _action_rows(act, B)[groups]
    encoded = model.expand_encoded(model.encode_observation(params, obs), groups)
    noise = np.concatenate([streams[b].noise(k, n, model.state_dim) for b in range(B)])
    states, mean = model.propagate(params, prev_states, action_rows, noise)
    log_lik = model.log_likelihood(params, states, encoded)
    log_w = _normalize(log_w + ad.reshape(log_lik, (B, n)), k)

    records = [
        StepRecord(k, float(ess[b]), bool(resampled[b]), ancestors[b], log_w.data[b].copy(),
                   log_lik.data[b * n : (b + 1) * n].copy(), noise_stream=(streams[b].trajectory, k, _NOISE))
        for b in range(B)
    ]
    if acc is not None:
        if acc.is_block_start(k):
            log_mu = model.initial_log_density(states)
            for b, r in enumerate(records):
                r.log_mu = log_mu.data[b * n : (b + 1) * n].copy()
            acc.start(log_mu + log_lik)
        else:
            log_g = model.transition_log_density(params, states, prev_states, action_rows, mean=mean)
            for b, r in enumerate(records):
                r.log_trans = log_g.data[b * n : (b + 1) * n].copy()
            acc.extend(log_g + log_lik)
        if acc.closes_block(k):
            acc.close(log_w)
    return FilterState(states, log_w, k), records


def _initial_states(traj, model: StateSpaceModel, config: FilterConfig, streams: RandomStreams) -> np.ndarray:
    rng = streams.init_generator()
    n = config.n_particles
    if config.init.mode == "prior":
        return model.initial.sample(rng, n)
    if traj.true_states is None:
        raise ContractError("truth initialisation needs the true first state")
    std = np.asarray(config.init.std, dtype=np.float64)
    s = traj.true_states[0] + std * rng.standard_normal((n, std.size))
    mask = model.angular_mask
    s[:, mask] = np.pi - np.mod(np.pi - s[:, mask], 2.0 * np.pi)
    return s


def filter_forward_batch(
    trajs,
    params: ParamStore,
    model: StateSpaceModel,
    config: FilterConfig,
    trajectory_indices=None,
    seed: int | None = None,
    replay=None,
    track_blocks: bool = True,
    keep_clouds: bool = False,
    initial_states=None,
) -> BatchFilterOutput:
    """Filter a list of equal-length trajectories in one graph.

    Each trajectory draws from its own :class:`RandomStreams` keyed by its
    entry in ``trajectory_indices`` (default ``0..B-1``), so its particles do
    not depend on which other trajectories share the batch.  ``replay`` is a
    list of ``{k: ancestors or None}`` maps forcing recorded resampling
    decisions.
    """
    trajs = list(trajs)
    B = len(trajs)
    if B == 0:
        raise ContractError("empty trajectory batch")
    T = trajs[0].observations.shape[0]
    if T < 2:
        raise ContractError("trajectory must have at least 2 steps")
    if any(t.observations.shape[0] != T for t in trajs):
        raise ContractError("trajectories in a batch must share their length")
    indices = list(range(B)) if trajectory_indices is None else [int(i) for i in trajectory_indices]
    base_seed = config.seed if seed is None else seed
    streams = [RandomStreams(base_seed, i) for i in indices]
    n = config.n_particles
    if initial_states is None:
        initial_states = [_initial_states(t, model, config, st) for t, st in zip(trajs, streams)]
    states = DiffValue(np.concatenate([np.asarray(s, dtype=np.float64) for s in initial_states]))
    if states.shape[0] != B * n:
        raise ContractError(f"initial states have {states.shape[0]} rows, expected {B * n}")
    log_w = DiffValue(np.full((B, n), -np.log(n)))
    acc = BlockAccumulator(config.block_length, B) if track_blocks else None
    events = [EventLog(st.seed, st.trajectory) for st in streams]
    obs = np.stack([t.observations for t in trajs], axis=1)  # T x B x D_o
    act = np.stack([t.actions for t in trajs], axis=1)

    records = [StepRecord(1, float(n), False, None, log_w.data[b].copy(), np.zeros(n)) for b in range(B)]
    if acc is not None:
        # eta's first factor pairs mu with the likelihood of o_1; the filter
        # weights themselves start uniform.
        groups = np.repeat(np.arange(B), n)
        encoded = model.expand_encoded(model.encode_observation(params, obs[0]), groups)
        log_lik = model.log_likelihood(params, states, encoded)
        log_mu = model.initial_log_density(states)
        for b, r in enumerate(records):
            r.log_lik = log_lik.data[b * n : (b + 1) * n].copy()
            r.log_mu = log_mu.data[b * n : (b + 1) * n].copy()
        acc.start(log_mu + log_lik)
        if acc.closes_block(1):
            acc.close(log_w)
    for ev, r in zip(events, records):
        ev.steps.append(r)

    estimates = [ad.weighted_circular_mean(states, log_w, model.angular_mask)]
    clouds = [(states.data.copy(), log_w.data.copy())] if keep_clouds else None
    state = FilterState(states, log_w, 1)
    for k in range(2, T + 1):
        state, records = filter_step(state, obs[k - 1], act[k - 1], params, model, config, streams, acc, replay)
        for ev, r in zip(events, records):
            ev.steps.append(r)
        estimates.append(ad.weighted_circular_mean(state.states, state.log_weights, model.angular_mask))
        if clouds is not None:
            clouds.append((state.states.data.copy(), state.log_weights.data.copy()))

    est = ad.concat(estimates, axis=0)
    ess = np.array([[r.ess for r in ev.steps] for ev in events])
    resampled = np.array([[r.resampled for r in ev.steps] for ev in events])
    q_sum = acc.q_sum if acc is not None else DiffValue(np.zeros(B))
    blocks = acc.blocks_completed if acc is not None else 0
    return BatchFilterOutput(est, ess, resampled, q_sum, blocks, events, clouds)


def filter_forward(
    traj,
    params: ParamStore,
    model: StateSpaceModel,
    config: FilterConfig,
    trajectory_index: int = 0,
    seed: int | None = None,
    replay: dict[int, np.ndarray | None] | None = None,
    track_blocks: bool = True,
    keep_clouds: bool = False,
    initial_states: np.ndarray | None = None,
) -> FilterOutput:
    """Run the filter over one trajectory (observations ``T x D_o``, actions ``T x D_a``).

    ``replay`` maps step ``k`` to the ancestor indices (or ``None``) recorded by
    an earlier run, forcing identical resampling decisions.
    """
    out = filter_forward_batch(
        [traj], params, model, config, [trajectory_index], seed,
        None if replay is None else [replay], track_blocks, keep_clouds,
        None if initial_states is None else [initial_states],
    )
    q_sum = ad.sum(out.q_sum) if track_blocks else DiffValue(0.0)
    clouds = None if out.clouds is None else [(s, lw[0]) for s, lw in out.clouds]
    return FilterOutput(out.estimates, out.ess[0], out.resampled[0], q_sum, out.blocks_completed,
                        out.events[0], clouds)


def recompute_q_sum(events: EventLog, block_length: int) -> tuple[float, int]:
    """Brute-force sum over closed blocks of ``sum_i w_i log eta_i``, tracing each
    lineage backwards through the logged ancestor indices."""
    steps = {r.k: r for r in events.steps}
    T = max(steps)
    total, blocks = 0.0, 0
    for close in range(block_length, T + 1, block_length):
        start = close - block_length + 1
        n = steps[close].log_weights.size
        for i in range(n):
            idx, eta = i, 0.0
            for k in range(close, start - 1, -1):
                rec = steps[k]
                if k == start:
                    eta += rec.log_mu[idx] + rec.log_lik[idx]
                else:
                    eta += rec.log_trans[idx] + rec.log_lik[idx]
                    if rec.ancestors is not None:
                        idx = int(rec.ancestors[idx])
            total += np.exp(steps[close].log_weights[i]) * eta
        blocks += 1
    return total, blocks
