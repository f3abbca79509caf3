import math

import numpy as np
import pytest

from sdpf.core import ContractError
from sdpf.envs import (
    PRESETS,
    BeaconOracleModel,
    BeaconWorldSpec,
    LinearGaussianModel,
    LinearGaussianSpec,
    beacon_observation,
    generate_beacon_world,
    generate_linear_gaussian,
    kalman_oracle,
    mask_labels,
    stationary_posterior_cov,
    true_kinematics,
)

SPEC = BeaconWorldSpec()


def _lg(a=1.0, q=1e-300, r=1.0, policy="constant", scale=(1.0, 0.0), dim=2):
    eye = tuple(tuple(float(i == j) for j in range(dim)) for i in range(dim))
    return LinearGaussianSpec(
        tuple(tuple(a * v for v in row) for row in eye), eye, eye,
        (q,) * dim, (r,) * dim, (0.0,) * dim, (1e-300,) * dim, policy, scale,
    )


def test_noise_free_linear_system_is_an_arithmetic_progression():
    ds = generate_linear_gaussian(_lg(), 6, 1, 0)
    s = ds.true_states[0]
    steps = np.diff(s, axis=0)
    np.testing.assert_allclose(steps, np.tile([1.0, 0.0], (5, 1)), atol=1e-12)


def test_generation_is_a_pure_function_of_its_inputs():
    spec = LinearGaussianSpec.scalar()
    assert generate_linear_gaussian(spec, 10, 3, 5).to_bytes() == generate_linear_gaussian(spec, 10, 3, 5).to_bytes()
    assert generate_linear_gaussian(spec, 10, 3, 5).to_bytes() != generate_linear_gaussian(spec, 10, 3, 6).to_bytes()
    assert generate_beacon_world(SPEC, 10, 2, 5).to_bytes() == generate_beacon_world(SPEC, 10, 2, 5).to_bytes()


def test_process_noise_sample_mean_is_zero():
    spec = LinearGaussianSpec.scalar(a=0.0, q=1.0, r=1.0, m0=0.0, p0=1.0, b=0.0)
    ds = generate_linear_gaussian(spec, 1001, 100, 3)
    # with A = 0 and B = 0 every state after the first is pure process noise
    draws = ds.true_states[:, 1:, 0].ravel()
    n = draws.size
    assert n == 100_000
    assert abs(draws.mean()) < 3.0 / math.sqrt(n)


def test_kalman_small_observation_noise_tracks_observations():
    spec = _lg(a=0.9, q=1.0, r=1e-8, policy="gaussian", scale=(0.5, 0.5))
    ds = generate_linear_gaussian(spec, 20, 1, 4)
    kf = kalman_oracle(spec, ds[0])
    np.testing.assert_allclose(kf.means[1:], ds.observations[0, 1:], atol=1e-3)


def test_kalman_with_blind_sensor_is_pure_prediction():
    spec = LinearGaussianSpec(((0.8,),), ((1.0,),), ((0.0,),), (1.0,), (1.0,), (2.0,), (1.0,), "gaussian", (0.5,))
    ds = generate_linear_gaussian(spec, 10, 1, 2)
    kf = kalman_oracle(spec, ds[0])
    m, P = 2.0, 1.0
    for t in range(10):
        if t > 0:
            m, P = 0.8 * m + ds.actions[0, t, 0], 0.64 * P + 1.0
        assert kf.means[t, 0] == pytest.approx(m, rel=1e-12)
        assert kf.covs[t, 0, 0] == pytest.approx(P, rel=1e-12)


def test_scalar_riccati_fixed_point():
    a, q, r = 0.9, 1.0, 1.0
    p = 1.0
    for _ in range(10_000):
        pp = a * a * p + q
        p = pp - pp * pp / (pp + r)
    spec = LinearGaussianSpec.scalar(a=a, q=q, r=r)
    assert stationary_posterior_cov(spec)[0, 0] == pytest.approx(p, rel=1e-10)
    ds = generate_linear_gaussian(spec, 200, 1, 1)
    assert kalman_oracle(spec, ds[0]).covs[-1, 0, 0] == pytest.approx(p, rel=1e-10)


def test_kalman_rejects_singular_innovation():
    # two identical noiseless sensors make the innovation covariance rank one
    spec = LinearGaussianSpec(((0.5, 0.0), (0.0, 0.5)), ((1.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 0.0)),
                              (1.0, 1.0), (1e-300, 1e-300), (0.0, 0.0), (1.0, 1.0))
    ds = generate_linear_gaussian(spec, 3, 1, 0)
    with pytest.raises(np.linalg.LinAlgError):
        kalman_oracle(spec, ds[0])


def test_linear_gaussian_spec_round_trip_and_contracts():
    spec = LinearGaussianSpec.scalar()
    assert LinearGaussianSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ContractError):
        LinearGaussianSpec(((1.0,),), ((1.0,),), ((1.0,),), (-1.0,), (1.0,), (0.0,), (1.0,))
    with pytest.raises(ContractError):
        LinearGaussianModel(LinearGaussianSpec.scalar(q=0.0))


def test_linear_gaussian_model_density_matches_closed_form():
    spec = LinearGaussianSpec.scalar(a=0.5, q=4.0, r=9.0)
    model = LinearGaussianModel(spec)
    lik = model.log_likelihood(None, np.array([[1.0]]), np.array([4.0])).data[0]
    assert lik == pytest.approx(-0.5 * (3.0 / 3.0) ** 2 - math.log(3.0) - 0.5 * math.log(2 * math.pi))
    mean = model.predict_mean(None, np.array([[2.0]]), np.array([1.0])).data[0, 0]
    assert mean == pytest.approx(0.5 * 2.0 + 1.0)


def test_beacon_closed_loop_replay_is_exact():
    spec = BeaconWorldSpec(odometry_std=(1e-300, 1e-300, 1e-300))
    ds = generate_beacon_world(spec, 60, 3, 11)
    for i in range(3):
        s = ds.true_states[i]
        replayed = [s[0]]
        for t in range(1, 60):
            replayed.append(true_kinematics(replayed[-1], ds.actions[i, t]))
        np.testing.assert_allclose(np.array(replayed), s, atol=1e-9)


def test_beacon_robot_stays_in_arena():
    ds = generate_beacon_world(SPEC, 200, 10, 12)
    x0, x1, y0, y1 = SPEC.arena
    pos = ds.true_states[..., :2]
    assert pos[..., 0].min() >= x0 and pos[..., 0].max() <= x1
    assert pos[..., 1].min() >= y0 and pos[..., 1].max() <= y1
    assert np.all(np.abs(ds.true_states[..., 2]) <= math.pi)


def test_noise_free_range_is_euclidean_distance():
    pose = np.array([3.0, 4.0, 0.5])
    obs = beacon_observation(SPEC, pose)
    np.testing.assert_allclose(obs[:4], [5.0, math.hypot(7.0, 4.0), math.hypot(3.0, 6.0), math.hypot(7.0, 6.0)])
    bearing0 = math.atan2(-4.0, -3.0) - 0.5
    assert obs[4] == pytest.approx(math.sin(bearing0))
    assert obs[8] == pytest.approx(math.cos(bearing0))
    range_only = BeaconWorldSpec(observation_kind="range")
    assert beacon_observation(range_only, pose).shape == (4,)


def test_beacon_spec_contracts_and_round_trip():
    assert BeaconWorldSpec.from_dict(SPEC.to_dict()) == SPEC
    with pytest.raises(ContractError):
        BeaconWorldSpec(beacons=((11.0, 0.0),))
    with pytest.raises(ContractError):
        BeaconWorldSpec(beacons=())
    with pytest.raises(ContractError):
        BeaconWorldSpec(range_std=0.0)


def test_odometry_noise_moments():
    # recorded odometry = true local motion + noise; the true lateral motion is always zero
    ds = generate_beacon_world(SPEC, 101, 100, 13)
    lateral = ds.actions[:, 1:, 1].ravel()
    assert lateral.size == 10_000
    sd = SPEC.odometry_std[1]
    assert abs(lateral.mean()) < 4 * sd / math.sqrt(lateral.size)
    assert lateral.std() == pytest.approx(sd, rel=0.05)


@pytest.mark.parametrize("ratio, count", [(1.0, 100), (0.0, 0), (0.1, 10), (0.25, 25)])
def test_mask_labels_counts(ratio, count):
    ds = mask_labels(generate_beacon_world(SPEC, 100, 4, 14), ratio, 15)
    np.testing.assert_array_equal(ds.label_mask.sum(axis=1), count)
    assert ds.true_states is not None


def test_mask_labels_is_independent_per_trajectory_and_seeded():
    base = generate_beacon_world(SPEC, 100, 3, 16)
    a = mask_labels(base, 0.1, 1)
    assert not np.array_equal(a.label_mask[0], a.label_mask[1])
    np.testing.assert_array_equal(a.label_mask, mask_labels(base, 0.1, 1).label_mask)
    with pytest.raises(ContractError):
        mask_labels(base, 1.5, 0)


def test_oracle_model_likelihood_peaks_at_truth():
    model = BeaconOracleModel(SPEC)
    pose = np.array([2.0, 7.0, -1.0])
    enc = model.encode_observation(None, beacon_observation(SPEC, pose))
    ll = model.log_likelihood(None, np.array([pose, pose + [0.5, 0.0, 0.0], pose + [0.0, 0.0, 0.3]]), enc).data
    assert ll[0] > ll[1] and ll[0] > ll[2]


def test_presets_record_benchmark_settings():
    assert PRESETS["maze"]["noise_scales"] == (20.0, 20.0, 0.5)
    assert PRESETS["maze"]["block_length"] == 20
    assert PRESETS["house3d"]["block_length"] == 4
    assert PRESETS["house3d"]["noise_scales"][2] == pytest.approx(math.radians(5.0))
