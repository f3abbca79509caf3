"""Self-checks exposed on the command line: the frozen-randomness gradient check and the Kalman comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, gradient_check
from .envs import (
    BeaconWorldSpec,
    LinearGaussianModel,
    LinearGaussianSpec,
    beacon_stationary_distribution,
    generate_beacon_world,
    generate_linear_gaussian,
    kalman_oracle,
    mask_labels,
    stationary_posterior_cov,
)
from .filter import FilterConfig, InitProtocol, filter_forward_batch
from .models import DynamicModelConfig, LearnedModel, MeasurementModelConfig, MlpSpec
from .objectives import LossConfig, batch_supervised_loss, combined_loss, pseudo_loglik

__all__ = [
    "KalmanComparison",
    "LG_SPEC_1D",
    "LG_SPEC_3D",
    "pipeline_gradcheck",
    "kalman_comparison",
]

LG_SPEC_1D = LinearGaussianSpec.scalar(a=0.9, q=1.0, r=1.0, m0=0.0, p0=1.0, b=1.0, action_scale=0.5)

LG_SPEC_3D = LinearGaussianSpec(
    A=((0.5, 0.1, 0.0), (0.0, 0.5, 0.1), (0.0, 0.0, 0.5)),
    B=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    C=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    process_var=(1.0, 1.0, 1.0),
    obs_var=(4.0, 4.0, 4.0),
    init_mean=(0.0, 0.0, 0.0),
    init_var=(1.0, 1.0, 1.0),
    action_policy="gaussian",
    action_scale=(0.5, 0.5, 0.5),
)


def pipeline_gradcheck(
    n_traj: int = 2,
    T: int = 8,
    n_particles: int = 5,
    block_length: int = 4,
    hidden: int = 8,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    resample_threshold: float | None = None,
    seed: int = 0,
) -> tuple[GradCheckReport, int]:
    """Gradient check of the combined loss through the whole filter on the beacon world.

    Noise draws are regenerated from the same substreams on every evaluation
    and the ancestors recorded by a reference run are replayed, so the loss is
    a smooth function of the parameters.  Returns the report and the number of
    resampling events exercised.
    """
    spec = BeaconWorldSpec()
    ds = mask_labels(generate_beacon_world(spec, T, n_traj, seed), 0.5, seed + 1)
    mask = ds.angular_mask
    feat = 4
    model = LearnedModel(
        DynamicModelConfig((0.3, 0.3, 0.1), MlpSpec((7, hidden, 3), seed=seed + 2)),
        MeasurementModelConfig(MlpSpec((spec.obs_dim, hidden, feat), seed=seed + 3),
                               MlpSpec((4, hidden, feat), seed=seed + 4)),
        beacon_stationary_distribution(spec),
        mask,
    )
    params = model.init_params()
    threshold = float(n_particles) if resample_threshold is None else resample_threshold
    fcfg = FilterConfig(n_particles=n_particles, block_length=block_length, resample_threshold=threshold,
                        seed=seed, init=InitProtocol("truth", (0.3, 0.3, 0.3)))
    trajs = [ds[i] for i in range(n_traj)]
    reference = filter_forward_batch(trajs, params, model, fcfg)
    replay = [ev.replay_ancestors() for ev in reference.events]
    loss_cfg = LossConfig(lambda1, lambda2)

    def loss(p):
        out = filter_forward_batch(trajs, p, model, fcfg, replay=replay)
        sup, _ = batch_supervised_loss(out, ds.true_states, ds.label_mask, mask)
        return combined_loss(sup, pseudo_loglik(out), loss_cfg)

    report = gradient_check(loss, params, step=step, tolerance=tolerance)
    return report, int(reference.resampled.sum())


@dataclass
class KalmanComparison:
    """Time-averaged |PF mean - KF mean| per dimension, relative to the stationary posterior std."""

    mean_abs_error: np.ndarray
    stationary_std: np.ndarray
    tolerance: float

    @property
    def ratio(self) -> np.ndarray:
        return self.mean_abs_error / self.stationary_std

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ratio <= self.tolerance))


def kalman_comparison(spec: LinearGaussianSpec, n_particles: int = 1000, n_traj: int = 50, T: int = 50,
                      seed: int = 0, tolerance: float = 0.05, chunk: int = 10) -> KalmanComparison:
    """Run the particle filter with the exact model densities against the Kalman posterior."""
    from . import autodiff as ad

    ds = generate_linear_gaussian(spec, T, n_traj, seed)
    model = LinearGaussianModel(spec)
    fcfg = FilterConfig(n_particles=n_particles, block_length=T, seed=seed, init=InitProtocol("prior"))
    errors = []
    with ad.no_grad():
        for c0 in range(0, n_traj, chunk):
            idx = list(range(c0, min(c0 + chunk, n_traj)))
            out = filter_forward_batch([ds[i] for i in idx], None, model, fcfg, idx, track_blocks=False)
            est = out.estimates_array()
            for b, i in enumerate(idx):
                kf = kalman_oracle(spec, ds[i])
                errors.append(np.abs(est[b] - kf.means))
    mean_abs = np.mean(np.concatenate(errors), axis=0)
    std = np.sqrt(np.diag(stationary_posterior_cov(spec)))
    return KalmanComparison(mean_abs, std, tolerance)
