"""Supervised loss on labelled steps, block pseudo-log-likelihood, and their combination."""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core import ContractError
from .filter import BatchFilterOutput, FilterOutput, filter_forward_batch
from .models import StateSpaceModel, _action_rows

__all__ = [
    "LossConfig",
    "UnsupervisedTermUnavailable",
    "supervised_loss",
    "batch_supervised_loss",
    "pseudo_loglik",
    "rescored_pseudo_loglik",
    "combined_loss",
]


class UnsupervisedTermUnavailable(ValueError):
    """No block closed anywhere in the batch, so Q is undefined."""


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01
    auto_balance: bool = False
    state_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.lambda1 + self.lambda2 <= 0 and not self.auto_balance:
            raise ContractError("lambda1 and lambda2 are both zero")


def supervised_loss(
    output: FilterOutput | DiffValue,
    true_states: np.ndarray,
    label_mask: np.ndarray,
    angular_mask: np.ndarray,
    scales: np.ndarray | None = None,
) -> tuple[DiffValue, bool]:
    """Mean over labelled steps of the scaled squared state error.

    Returns ``(loss, has_labels)``; with no labelled step the loss is a zero
    constant and a warning is issued.
    """
    est = output.estimates if isinstance(output, FilterOutput) else output
    idx = np.flatnonzero(label_mask)
    if idx.size == 0:
        warnings.warn("no labelled steps; supervised loss is zero", RuntimeWarning, stacklevel=2)
        return DiffValue(0.0), False
    d = est.shape[1]
    scales = np.ones(d) if scales is None else np.asarray(scales, dtype=np.float64)
    rows = ad.take(est, idx)
    diff = ad.wrap_offset(ad.constant(true_states[idx]) - rows, angular_mask)
    per_step = ad.matmul(ad.square(diff), scales)
    return ad.mean(per_step), True


def batch_supervised_loss(
    output: BatchFilterOutput,
    true_states: np.ndarray,
    label_mask: np.ndarray,
    angular_mask: np.ndarray,
    scales: np.ndarray | None = None,
) -> tuple[DiffValue, bool]:
    """Average over labelled trajectories of each one's :func:`supervised_loss`.

    ``true_states`` is ``B x T x D`` and ``label_mask`` is ``B x T``;
    trajectories without labels are skipped.
    """
    label_mask = np.asarray(label_mask, dtype=bool)
    counts = label_mask.sum(axis=1)
    labelled = np.flatnonzero(counts)
    if labelled.size == 0:
        return DiffValue(0.0), False
    rows, targets, weights = [], [], []
    for b in labelled:
        steps = np.flatnonzero(label_mask[b])
        rows.append(output.row_index(int(b), steps))
        targets.append(true_states[b, steps])
        weights.append(np.full(steps.size, 1.0 / (counts[b] * labelled.size)))
    d = output.estimates.shape[1]
    scales = np.ones(d) if scales is None else np.asarray(scales, dtype=np.float64)
    est = ad.take(output.estimates, np.concatenate(rows))
    diff = ad.wrap_offset(ad.constant(np.concatenate(targets)) - est, angular_mask)
    per_row = ad.matmul(ad.square(diff), scales)
    return ad.matmul(per_row, np.concatenate(weights)), True


def pseudo_loglik(outputs: Sequence[FilterOutput] | BatchFilterOutput) -> DiffValue:
    """Average block pseudo-log-likelihood over every completed block in ``outputs``."""
    if isinstance(outputs, BatchFilterOutput):
        blocks = outputs.blocks_completed * outputs.batch_size
        if blocks == 0:
            raise UnsupervisedTermUnavailable("no completed pseudo-likelihood block")
        return ad.sum(outputs.q_sum) * (1.0 / blocks)
    blocks = sum(o.blocks_completed for o in outputs)
    if blocks == 0:
        raise UnsupervisedTermUnavailable("no completed pseudo-likelihood block")
    total = outputs[0].q_sum
    for o in outputs[1:]:
        total = total + o.q_sum
    return total * (1.0 / blocks)


def rescored_pseudo_loglik(
    trajs,
    params_eval,
    model_eval: StateSpaceModel,
    params_run,
    model_run: StateSpaceModel,
    config,
    seed: int,
    trajectory_indices=None,
) -> float:
    """Block pseudo-log-likelihood of ``model_eval`` on particles drawn by ``model_run``.

    The filter runs under ``model_run``; every closed block's lineages, and the
    weights used to average them, come from that run.  Each lineage's log eta
    is then recomputed with the initial, transition and measurement densities
    of ``model_eval``.  With both models equal this reproduces
    :func:`pseudo_loglik`.  Evaluated without gradients.
    """
    trajs = list(trajs)
    with ad.no_grad():
        run = filter_forward_batch(trajs, params_run, model_run, config, trajectory_indices, seed,
                                   track_blocks=False, keep_clouds=True)
        B, n, L = len(trajs), config.n_particles, config.block_length
        T = len(run.clouds)
        groups = np.repeat(np.arange(B), n)
        obs = np.stack([t.observations for t in trajs], axis=1)
        act = np.stack([t.actions for t in trajs], axis=1)
        total, blocks = 0.0, 0
        eta = None
        prev = None
        for k in range(1, T + 1):
            states, log_w = run.clouds[k - 1]
            encoded = model_eval.expand_encoded(model_eval.encode_observation(params_eval, obs[k - 1]), groups)
            log_lik = model_eval.log_likelihood(params_eval, states, encoded).data
            if k >= 2:
                anc = [run.events[b].steps[k - 1].ancestors for b in range(B)]
                idx = np.concatenate([b * n + (np.arange(n) if a is None else a) for b, a in enumerate(anc)])
                prev = prev[idx]
                if eta is not None:
                    eta = eta[idx]
            if (k - 1) % L == 0:
                eta = model_eval.initial_log_density(states).data + log_lik
            else:
                rows = _action_rows(act[k - 1], B)[groups]
                eta = eta + model_eval.transition_log_density(params_eval, states, prev, rows).data + log_lik
            if k % L == 0:
                total += float(np.sum(np.exp(log_w) * eta.reshape(B, n)))
                blocks += B
                eta = None
            prev = states
    if blocks == 0:
        raise UnsupervisedTermUnavailable("no completed pseudo-likelihood block")
    return total / blocks


def combined_loss(sup, q, cfg: LossConfig) -> DiffValue:
    """``lambda1 * sup - lambda2 * q``.

    With ``auto_balance`` the first call fixes ``cfg.lambda2`` so that both
    terms have equal magnitude; later calls reuse the frozen value.
    """
    sup, q = ad.constant(sup), ad.constant(q)
    if not (np.isfinite(sup.data) and np.isfinite(q.data)):
        raise ContractError("non-finite loss component")
    if cfg.auto_balance:
        if abs(q.data) > 0 and cfg.lambda1 * abs(sup.data) > 0:
            cfg.lambda2 = float(cfg.lambda1 * abs(sup.data) / abs(q.data))
        cfg.auto_balance = False
    if cfg.lambda1 == 0 and cfg.lambda2 == 0:
        raise ContractError("lambda1 and lambda2 are both zero")
    return sup * cfg.lambda1 - q * cfg.lambda2
