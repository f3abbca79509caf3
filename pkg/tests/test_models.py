import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdpf import autodiff as ad
from sdpf.autodiff import ParamStore, gradient_check
from sdpf.core import ContractError
from sdpf.models import (
    DegenerateFeatureError,
    DynamicModelConfig,
    InitialDistribution,
    LearnedModel,
    MeasurementModelConfig,
    MlpSpec,
    action_transform,
    init_mlp,
    initial_log_density,
    measurement_log_likelihood,
    observation_encode,
    propagate_sample,
    state_encode,
    transition_log_density,
)

MASK = np.array([False, False, True])
EPS = 1e-6


def _dyn(scales=(1.0, 1.0, 1.0), zero_output=True, seed=0):
    return DynamicModelConfig(scales, MlpSpec((7, 6, 3), seed=seed, zero_output=zero_output))


def _meas(feat=3, seed=0):
    return MeasurementModelConfig(MlpSpec((2, 5, feat), seed=seed), MlpSpec((4, 5, feat), seed=seed + 1), EPS)


def _params(dyn=None, meas=None):
    ps = ParamStore()
    init_mlp(ps, "f", (dyn or _dyn()).f_spec)
    init_mlp(ps, "h", (meas or _meas()).h_spec)
    init_mlp(ps, "hhat", (meas or _meas()).hhat_spec)
    return ps


def _constant_encoder(ps, prefix, vector):
    """Make the encoder output ``vector`` for every input."""
    ps[f"{prefix}/W1"].data[...] = 0.0
    ps[f"{prefix}/b1"].data[...] = vector


def test_zero_output_layer_gives_zero_displacement():
    ps = _params()
    out = action_transform(ps, [0.3, -1.0, 2.0], [1.0, 0.5, -0.2], _dyn(), MASK)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_action_transform_hand_evaluated():
    spec = MlpSpec((7, 1, 3))
    cfg = DynamicModelConfig((1.0, 1.0, 1.0), spec)
    ps = ParamStore()
    init_mlp(ps, "f", spec)
    ps["f/W0"].data[...] = np.array([[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]]).T
    ps["f/b0"].data[...] = [0.1]
    ps["f/W1"].data[...] = [[1.0, -1.0, 0.5]]
    ps["f/b1"].data[...] = [0.0, 0.0, 0.2]
    # input row is (x, y, sin b, cos b, a_x, a_y, a_b) = (0, 0, 0, 1, 1, 0, 0)
    h = math.tanh(2.0 * 1.0 + 0.1)
    out = action_transform(ps, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], cfg, MASK)
    np.testing.assert_allclose(out.data[0], [h, -h, 0.5 * h + 0.2], rtol=1e-15)


def test_propagate_identity_and_pure_noise():
    ps = _params()
    s = np.array([0.5, -0.2, 1.0])
    tiny = DynamicModelConfig((1e-300,) * 3, _dyn().f_spec)
    np.testing.assert_allclose(propagate_sample(ps, s, np.zeros(3), [3.0, -2.0, 1.0], tiny, MASK).data[0], s)
    out = propagate_sample(ps, np.zeros(3), np.zeros(3), [1.0, -1.0, 0.0], _dyn(), MASK)
    np.testing.assert_allclose(out.data[0], [1.0, -1.0, 0.0])


def test_propagate_wraps_heading():
    ps = _params()
    cfg = DynamicModelConfig((1.0, 1.0, 0.5), _dyn().f_spec)
    out = propagate_sample(ps, [0.0, 0.0, 3.0], np.zeros(3), [0.0, 0.0, 1.0], cfg, MASK)
    assert out.data[0, 2] == pytest.approx(3.5 - 2 * math.pi)
    assert out.data[0, 2] == pytest.approx(-2.7832, abs=1e-4)


def test_propagate_rejects_nonfinite_noise():
    with pytest.raises(ContractError):
        propagate_sample(_params(), np.zeros(3), np.zeros(3), [np.nan, 0.0, 0.0], _dyn(), MASK)


def test_propagate_is_bitwise_deterministic():
    ps = _params(_dyn(zero_output=False))
    args = ([0.1, 0.2, 3.1], [0.3, -0.1, 0.05], [0.7, -0.4, 1.2], _dyn(zero_output=False), MASK)
    a = propagate_sample(ps, *args).data
    b = propagate_sample(ps, *args).data
    assert a.tobytes() == b.tobytes()


def test_transition_density_examples():
    ps = _params()
    s = np.array([0.4, -0.3, 2.0])
    at_mean = transition_log_density(ps, s, s, np.zeros(3), _dyn(), MASK).data[0]
    assert at_mean == pytest.approx(-2.756815, abs=1e-6)
    assert at_mean == pytest.approx(-1.5 * math.log(2 * math.pi), rel=1e-14)
    doubled = transition_log_density(ps, s, s, np.zeros(3), _dyn((2.0, 2.0, 2.0)), MASK).data[0]
    assert at_mean - doubled == pytest.approx(3 * math.log(2.0), rel=1e-13)


def test_transition_density_one_sigma_offset():
    sigma = 0.7
    cfg = DynamicModelConfig((sigma, 1.0, 1.0), _dyn().f_spec)
    ps = _params()
    s = np.zeros(3)
    val = transition_log_density(ps, s + [sigma, 0, 0], s, np.zeros(3), cfg, MASK).data[0]
    expected = (-0.5 - 0.5 * math.log(2 * math.pi * sigma**2)) - math.log(2 * math.pi)
    assert val == pytest.approx(expected, rel=1e-13)


def test_transition_density_uses_wrapped_heading():
    ps = _params()
    near = transition_log_density(ps, [0, 0, math.pi - 0.05], [0, 0, -math.pi + 0.05], np.zeros(3), _dyn(), MASK)
    direct = transition_log_density(ps, [0, 0, 0.1], [0, 0, 0.0], np.zeros(3), _dyn(), MASK)
    assert near.data[0] == pytest.approx(direct.data[0], rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_transition_density_peaks_at_predicted_mean(offset):
    dyn = _dyn(zero_output=False, seed=4)
    ps = _params(dyn)
    s_prev, a = np.array([0.2, 0.1, 0.4]), np.array([0.3, 0.0, 0.1])
    mean = s_prev + action_transform(ps, s_prev, a, dyn, MASK).data[0]
    peak = transition_log_density(ps, mean, s_prev, a, dyn, MASK).data[0]
    other = transition_log_density(ps, mean + np.array(offset), s_prev, a, dyn, MASK).data[0]
    assert other <= peak + 1e-12


def test_observation_encoder_hand_evaluated_and_deterministic():
    spec = MlpSpec((2, 2, 1))
    cfg = MeasurementModelConfig(spec, MlpSpec((4, 2, 1)))
    ps = ParamStore()
    init_mlp(ps, "h", spec)
    ps["h/W0"].data[...] = [[1.0, 0.0], [0.5, -1.0]]
    ps["h/b0"].data[...] = [0.0, 0.5]
    ps["h/W1"].data[...] = [[2.0], [1.0]]
    ps["h/b1"].data[...] = [0.25]
    # hidden = tanh((1, 2) @ W0 + b0) = tanh(2, -1.5)
    expected = 2.0 * math.tanh(2.0) + math.tanh(-1.5) + 0.25
    out = observation_encode(ps, [1.0, 2.0], cfg)
    assert out.data[0] == pytest.approx(expected, rel=1e-15)
    assert observation_encode(ps, [1.0, 2.0], cfg).data.tobytes() == out.data.tobytes()


def test_state_encoder_zero_network_and_determinism():
    meas = _meas()
    ps = _params(meas=meas)
    _constant_encoder(ps, "hhat", 0.0)
    np.testing.assert_array_equal(state_encode(ps, [1.0, 2.0, 0.3], meas, MASK).data, np.zeros((1, 3)))
    ps = _params(meas=meas)
    a = state_encode(ps, [1.0, 2.0, 0.3], meas, MASK).data
    assert state_encode(ps, [1.0, 2.0, 0.3], meas, MASK).data.tobytes() == a.tobytes()


def test_state_encoder_sees_heading_as_sin_cos():
    meas = _meas()
    ps = _params(meas=meas)
    a = state_encode(ps, [1.0, 2.0, 0.3], meas, MASK).data
    b = state_encode(ps, [1.0, 2.0, 0.3 + 2 * math.pi], meas, MASK).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize(
    "obs_feature, expected",
    [
        ([0.0, 1.0, 0.0], -math.log(1.0 + EPS)),
        ([-1.0, 0.0, 0.0], -math.log(2.0 + EPS)),
        ([1.0, 0.0, 0.0], -math.log(EPS)),
    ],
    ids=["orthogonal", "antiparallel", "identical"],
)
def test_measurement_likelihood_examples(obs_feature, expected):
    meas = _meas()
    ps = _params(meas=meas)
    _constant_encoder(ps, "hhat", [1.0, 0.0, 0.0])
    val = measurement_log_likelihood(ps, [0.0, 0.0, 0.0], np.array(obs_feature), meas, MASK).data[0]
    assert val == pytest.approx(expected, rel=1e-9)


def test_identical_features_hit_the_cap():
    meas = _meas()
    ps = _params(meas=meas)
    e = state_encode(ps, [0.3, 0.1, 1.0], meas, MASK)
    val = measurement_log_likelihood(ps, [0.3, 0.1, 1.0], e.data[0], meas, MASK).data[0]
    assert val == pytest.approx(math.log(meas.d_max), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_measurement_likelihood_is_scale_invariant(scale, seed):
    meas = _meas(seed=seed)
    ps = _params(meas=meas)
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(4, 3))
    e_obs = rng.normal(size=3)
    base = measurement_log_likelihood(ps, states, e_obs, meas, MASK).data
    ps["hhat/W1"].data[...] *= scale
    ps["hhat/b1"].data[...] *= scale
    scaled_state = measurement_log_likelihood(ps, states, e_obs, meas, MASK).data
    scaled_obs = measurement_log_likelihood(ps, states, e_obs * scale, meas, MASK).data
    np.testing.assert_allclose(scaled_state, base, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled_obs, scaled_state, rtol=1e-9, atol=1e-12)


def test_measurement_likelihood_flags_dead_encoder():
    meas = _meas()
    ps = _params(meas=meas)
    _constant_encoder(ps, "hhat", 0.0)
    with pytest.raises(DegenerateFeatureError):
        measurement_log_likelihood(ps, [0.0, 0.0, 0.0], np.ones(3), meas, MASK)
    ps = _params(meas=meas)
    with pytest.raises(DegenerateFeatureError):
        measurement_log_likelihood(ps, [0.0, 0.0, 0.0], np.zeros(3), meas, MASK)


def test_initial_density_examples():
    box = InitialDistribution.uniform((0.0, 0.0, -math.pi), (1.0, 1.0, math.pi), MASK)
    assert initial_log_density(box, np.array([0.5, 0.5, 0.1])) == pytest.approx(-math.log(2 * math.pi))
    assert initial_log_density(box, np.array([1.5, 0.5, 0.1])) == -np.inf
    gauss = InitialDistribution.gaussian((1.0, -2.0, 0.5), (1.0, 1.0, 1.0), MASK)
    assert initial_log_density(gauss, np.array([1.0, -2.0, 0.5])) == pytest.approx(-1.5 * math.log(2 * math.pi))


def test_initial_distribution_contracts_and_round_trip():
    with pytest.raises(ContractError):
        InitialDistribution.uniform((1.0,), (0.0,))
    with pytest.raises(ContractError):
        InitialDistribution.gaussian((0.0,), (0.0,))
    dist = InitialDistribution(("uniform", "gaussian"), (0.0, 1.0), (2.0, 0.5), (False, True))
    assert InitialDistribution.from_dict(dist.to_dict()) == dist


def test_initial_samples_lie_in_support():
    box = InitialDistribution.uniform((0.0, 0.0, -math.pi), (1.0, 2.0, math.pi), MASK)
    samples = box.sample(np.random.default_rng(0), 500)
    assert np.isfinite(initial_log_density(box, samples)).all()


def _random_learned(seed=0):
    dyn = DynamicModelConfig((0.3, 0.3, 0.1), MlpSpec((7, 5, 3), seed=seed))
    meas = MeasurementModelConfig(MlpSpec((2, 5, 4), seed=seed + 1), MlpSpec((4, 5, 4), seed=seed + 2))
    init = InitialDistribution.gaussian((0.0, 0.0, 0.0), (1.0, 1.0, 0.5), MASK)
    return LearnedModel(dyn, meas, init, MASK)


GRAD_CASES = {
    "action_transform": lambda m, p, x: ad.sum(ad.square(action_transform(p, x["s"], x["a"], m.dynamic, MASK))),
    "propagate": lambda m, p, x: ad.sum(ad.square(propagate_sample(p, x["s"], x["a"], x["z"], m.dynamic, MASK))),
    "transition": lambda m, p, x: ad.sum(transition_log_density(p, x["s2"], x["s"], x["a"], m.dynamic, MASK)),
    "observation_encode": lambda m, p, x: ad.sum(ad.tanh(observation_encode(p, x["o"], m.measurement))),
    "state_encode": lambda m, p, x: ad.sum(ad.tanh(state_encode(p, x["s"], m.measurement, MASK))),
    "likelihood": lambda m, p, x: ad.sum(m.log_likelihood(p, x["s"], m.encode_observation(p, x["o"][0]))),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_model_gradients_match_finite_differences(name):
    model = _random_learned(3)
    params = model.init_params()
    rng = np.random.default_rng(5)
    x = {"s": rng.normal(size=(4, 3)), "s2": rng.normal(size=(4, 3)), "a": rng.normal(size=3),
         "z": rng.normal(size=(4, 3)), "o": rng.normal(size=(4, 2))}
    report = gradient_check(lambda p: GRAD_CASES[name](model, p, x), params)
    assert report.passed, report


def test_config_contracts():
    with pytest.raises(ContractError):
        MlpSpec((3,))
    with pytest.raises(ContractError):
        MlpSpec((3, 0))
    with pytest.raises(ContractError):
        DynamicModelConfig((1.0, 0.0, 1.0), MlpSpec((7, 3)))
    with pytest.raises(ContractError):
        MeasurementModelConfig(MlpSpec((2, 3)), MlpSpec((4, 5)))
    with pytest.raises(ContractError):
        MeasurementModelConfig(MlpSpec((2, 3)), MlpSpec((4, 3)), epsilon_c=0.0)
    with pytest.raises(ContractError):
        MlpSpec((2, 3), input_shift=(0.0,))
    with pytest.raises(ContractError):
        MlpSpec((2, 3), input_scale=(1.0, 0.0))


def test_input_standardisation_equals_transformed_input():
    plain = MlpSpec((2, 4, 3), seed=3)
    scaled = MlpSpec((2, 4, 3), seed=3, input_shift=(1.0, -2.0), input_scale=(2.0, 0.5))
    ps = ParamStore()
    init_mlp(ps, "h", plain)
    o = np.array([[3.0, -1.0], [0.0, 4.0]])
    a = observation_encode(ps, o, MeasurementModelConfig(scaled, MlpSpec((4, 4, 3))))
    b = observation_encode(ps, (o - [1.0, -2.0]) / [2.0, 0.5], MeasurementModelConfig(plain, MlpSpec((4, 4, 3))))
    np.testing.assert_allclose(a.data, b.data, rtol=1e-14)


def test_standardised_state_encoder_gradient():
    spec = MlpSpec((4, 5, 3), seed=2, input_shift=(5.0, 5.0, 0.0, 0.0), input_scale=(3.0, 3.0, 0.7, 0.7))
    cfg = MeasurementModelConfig(MlpSpec((2, 5, 3), seed=1), spec)
    ps = _params(meas=cfg)
    s = ad.DiffValue(np.array([[4.0, 6.0, 0.3], [1.0, 2.0, -2.0]]), requires_grad=True)
    out = ad.sum(state_encode(ps, s, cfg, MASK))
    ad.backward(out)
    h = 1e-6
    for i, j in [(0, 0), (1, 2)]:
        up, dn = s.data.copy(), s.data.copy()
        up[i, j] += h
        dn[i, j] -= h
        with ad.no_grad():
            fd = (float(ad.sum(state_encode(ps, up, cfg, MASK)).data)
                  - float(ad.sum(state_encode(ps, dn, cfg, MASK)).data)) / (2 * h)
        assert s.grad[i, j] == pytest.approx(fd, rel=1e-6)
