import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgfilter.filters import (
    FilterError,
    MEKFState,
    MFGFilterState,
    MeasurementNoiseSpec,
    as_gaussian,
    as_matrix_fisher,
    convert_measurement_noise,
    error_metrics,
    mekf_step,
    mekf_uncertainty,
    mfg_filter_step,
    mfg_uncertainty,
)
from mfgfilter.harness import ScenarioConfig, attitude_measurements, generate_truth, run_trial
from mfgfilter.measurement import AttitudeMeasurement, update
from mfgfilter.mfg import MFGParams
from mfgfilter.propagation import GyroNoiseModel
from mfgfilter.so3 import exp_so3, proper_svd, uniform_rotation
from strategies import seeds


def mfg_belief(R_hat, x_hat, S0, bias_var):
    svd = proper_svd(R_hat @ np.diag(S0))
    return MFGParams(x_hat, bias_var * np.eye(3), np.zeros((3, 3)), svd.U, svd.S, svd.V).validate()


def mekf_belief(R_hat, x_hat, att_cov, bias_var):
    P = np.zeros((6, 6))
    P[:3, :3] = att_cov
    P[3:, 3:] = bias_var * np.eye(3)
    return MEKFState(R_hat, np.array(x_hat, dtype=float), P)


def run_estimates(config, truth, meas, mfg0, mekf0, backends=("analytical",), Sigma_m=None, F_Z=None):
    """Per-step attitude estimates of the requested filters on one stream."""
    model = config.noise_model()
    out = {b: [mfg0.U @ mfg0.V.T] for b in backends}
    out["mekf"] = [mekf0.R_hat]
    states = {b: MFGFilterState(mfg0) for b in backends}
    ekf = mekf0
    for k in range(config.n_steps):
        Z = meas.get(k + 1)
        for b in backends:
            am = () if Z is None else (AttitudeMeasurement(Z, F_Z),)
            states[b] = mfg_filter_step(states[b], truth.Omega[k], model, b, am)
            out[b].append(states[b].attitude)
        am = () if Z is None else (AttitudeMeasurement(Z, np.zeros((3, 3))),)
        ekf = mekf_step(ekf, truth.Omega[k], model, am, Sigma_m=Sigma_m)
        out["mekf"].append(ekf.R_hat)
    return {k: np.array(v) for k, v in out.items()}, states, ekf


def angles_between(A, B):
    return np.array([error_metrics(a, np.zeros(3), b, np.zeros(3))[0] for a, b in zip(A, B)])


# --------------------------------------------------------------------------
# metrics and proxies


def test_error_metric_examples(rng):
    R = uniform_rotation(rng)
    x = rng.standard_normal(3)
    assert error_metrics(R, x, R, x) == (0.0, 0.0)
    att, _ = error_metrics(R @ exp_so3([0.0, 0.1, 0.0]), x, R, x)
    assert np.isclose(att, 5.729577951308232, rtol=1e-12)
    _, bias = error_metrics(R, x + [0.01, 0.0, 0.0], R, x)
    assert np.isclose(bias, 0.5729577951308232, rtol=1e-12)


def test_uncertainty_proxies():
    p = MFGParams(np.zeros(3), 0.04 * np.eye(3), np.zeros((3, 3)), np.eye(3), np.full(3, 50.0), np.eye(3))
    att, bias = mfg_uncertainty(p)
    assert np.isclose(att, np.sqrt(1.0 / 100.0)) and np.isclose(bias, 0.2)
    flat = MFGParams(np.zeros(3), np.eye(3), np.zeros((3, 3)), np.eye(3), [100.0, 0.0, 0.0], np.eye(3))
    # no information about rotations around the first axis
    assert mfg_uncertainty(flat)[0] == np.inf
    s = mekf_belief(np.eye(3), np.zeros(3), np.diag([0.01, 0.02, 0.03]), 0.25)
    assert np.allclose(mekf_uncertainty(s), (0.1, 0.5))


# --------------------------------------------------------------------------
# measurement noise conversion


def test_concentrated_matrix_fisher_to_gaussian():
    g = convert_measurement_noise(MeasurementNoiseSpec.matrix_fisher([200.0, 200.0, 200.0]))
    assert g.kind == "gaussian_rotvec"
    assert np.allclose(np.diag(g.Sigma), 1.0 / 400.0, rtol=0.05)
    assert np.all(np.abs(g.Sigma - np.diag(np.diag(g.Sigma))) < 0.05 / 400.0)


def test_gaussian_to_matrix_fisher():
    f = convert_measurement_noise(MeasurementNoiseSpec.gaussian_rotvec(0.05**2 * np.eye(3)))
    S = proper_svd(f.F).S
    assert np.allclose(S, 200.0, rtol=0.05)


def relative_change(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(a)


@pytest.mark.parametrize("S", [[200.0, 200.0, 200.0], [400.0, 300.0, 150.0]])
def test_noise_round_trip_from_matrix_fisher(S):
    spec = MeasurementNoiseSpec.matrix_fisher(S)
    back = convert_measurement_noise(convert_measurement_noise(spec))
    assert relative_change(spec.F, back.F) < 0.02


@pytest.mark.parametrize("sd", [[0.05, 0.05, 0.05], [0.05, 0.03, 0.02]])
def test_noise_round_trip_from_gaussian(sd):
    spec = MeasurementNoiseSpec.gaussian_rotvec(np.square(sd))
    back = convert_measurement_noise(convert_measurement_noise(spec))
    assert relative_change(spec.Sigma, back.Sigma) < 0.02


def test_noise_conversion_is_deterministic():
    spec = MeasurementNoiseSpec.matrix_fisher([50.0, 40.0, 10.0])
    a, b = convert_measurement_noise(spec), convert_measurement_noise(spec)
    assert a.Sigma.tobytes() == b.Sigma.tobytes()


def test_noise_spec_validation(rng):
    with pytest.raises(ValueError):
        MeasurementNoiseSpec("other")
    with pytest.raises(ValueError):
        MeasurementNoiseSpec.gaussian_rotvec(np.diag([1.0, -1.0, 1.0]))
    g = MeasurementNoiseSpec.gaussian_rotvec([0.01, 0.02, 0.03])
    assert as_gaussian(g) is g and as_matrix_fisher(g).kind == "matrix_fisher"
    assert g.sample_error(rng, 5).shape == (5, 3, 3) and g.sample_error(rng).shape == (3, 3)


# --------------------------------------------------------------------------
# filters


def noiseless_setup(duration=2.0):
    cfg = ScenarioConfig(sigma_u=0.0, sigma_v=0.0, duration=duration)
    truth = generate_truth(cfg, np.random.default_rng(0))
    meas = {k: truth.R[k] for k in range(cfg.meas_every, cfg.n_steps + 1, cfg.meas_every)}
    return cfg, truth, meas


def test_filters_exact_without_noise():
    cfg, truth, meas = noiseless_setup()
    R0 = truth.R[0]
    est, states, ekf = run_estimates(
        cfg,
        truth,
        meas,
        # the bias is known exactly; a diffuse bias belief would bend the mode at second order
        mfg_belief(R0, np.zeros(3), [200.0] * 3, 1e-12),
        mekf_belief(R0, np.zeros(3), np.eye(3) / 400.0, 1e-12),
        backends=("analytical", "unscented"),
        Sigma_m=np.eye(3) / 400.0,
        F_Z=200.0 * np.eye(3),
    )
    for name, R_hat in est.items():
        assert np.max(angles_between(R_hat, truth.R)) < 1e-6, name
    assert np.allclose(states["analytical"].bias, 0.0, atol=1e-12)
    assert np.allclose(ekf.bias, 0.0, atol=1e-12)


def test_mekf_update_shrinks_trace(rng):
    model = GyroNoiseModel.isotropic(0.1, 0.01, 0.01)
    for _ in range(20):
        A = rng.standard_normal((6, 6))
        s = MEKFState(uniform_rotation(rng), rng.standard_normal(3), A @ A.T + 0.1 * np.eye(6))
        prior = mekf_step(s, np.zeros(3), model)
        Z = prior.R_hat @ exp_so3(0.1 * rng.standard_normal(3))
        post = mekf_step(s, np.zeros(3), model, [AttitudeMeasurement(Z, np.zeros((3, 3)))], Sigma_m=0.04 * np.eye(3))
        assert np.trace(post.Pcov) <= np.trace(prior.Pcov) + 1e-12
        assert np.min(np.linalg.eigvalsh(post.Pcov)) > 0


def test_mekf_needs_measurement_covariance():
    s = mekf_belief(np.eye(3), np.zeros(3), np.eye(3), 1.0)
    with pytest.raises(FilterError) as info:
        mekf_step(s, np.zeros(3), GyroNoiseModel.isotropic(0.1, 0.1, 0.01), [AttitudeMeasurement(np.eye(3), np.eye(3))])
    assert info.value.step == 1


def test_filter_errors_carry_step_index():
    p = mfg_belief(np.eye(3), np.zeros(3), [5.0, 5.0, 5.0], 0.01)
    state = MFGFilterState(p, 0.3, 44)
    with pytest.raises(FilterError) as info:
        mfg_filter_step(state, np.zeros(3), GyroNoiseModel.isotropic(0.1, 0.1, 0.01), "euler")
    assert info.value.step == 45


@given(seeds, st.lists(st.floats(0.1, 50.0), min_size=3, max_size=3))
@settings(max_examples=30)
def test_aligned_measurement_adds_concentration(seed, s_z):
    rng = np.random.default_rng(seed)
    prior = mfg_belief(uniform_rotation(rng), np.zeros(3), np.sort(rng.uniform(0.0, 30.0, 3))[::-1], 0.01)
    Z = prior.U @ prior.V.T
    post = update(prior, [AttitudeMeasurement(Z, np.diag(s_z))])
    assert np.sum(post.S) >= np.sum(prior.S) - 1e-9


def test_small_initial_error_converges():
    r = run_trial(ScenarioConfig(duration=5.0, seed=3), index=0)
    for name in ("mfg_analytical", "mfg_unscented", "mekf"):
        assert not r.failures
        assert np.all(r.attitude_error[name][-30:] < 15.0), name


@pytest.mark.slow
def test_backends_agree_over_a_minute():
    cfg = ScenarioConfig(seed=11)
    rng = np.random.default_rng(11)
    truth = generate_truth(cfg, rng)
    meas = attitude_measurements(cfg, truth, rng)
    noise_mf, noise_g = as_matrix_fisher(cfg.meas_noise), as_gaussian(cfg.meas_noise)
    R_hat = truth.R[0] @ cfg.meas_noise.sample_error(rng)
    mfg0 = mfg_belief(R_hat, np.zeros(3), proper_svd(noise_mf.F).S, 0.01)
    est, _, _ = run_estimates(
        cfg, truth, meas, mfg0, mekf_belief(R_hat, np.zeros(3), noise_g.Sigma, 0.01),
        backends=("analytical", "unscented"), Sigma_m=noise_g.Sigma, F_Z=noise_mf.F,
    )
    gap = angles_between(est["analytical"], est["unscented"])
    assert gap[-1] < 0.5 and np.max(gap) < 0.5, (gap[-1], gap.max())


def test_concentrated_mfg_tracks_mekf():
    cfg = ScenarioConfig(duration=10.0, meas_noise=MeasurementNoiseSpec.matrix_fisher([200.0] * 3))
    rng = np.random.default_rng(5)
    truth = generate_truth(cfg, rng)
    meas = attitude_measurements(cfg, truth, rng)
    noise_g = as_gaussian(cfg.meas_noise)
    S0 = 1e4
    init_g = as_gaussian(MeasurementNoiseSpec.matrix_fisher([S0] * 3)).Sigma
    R0 = truth.R[0]
    est, _, _ = run_estimates(
        cfg, truth, meas,
        mfg_belief(R0, np.zeros(3), [S0] * 3, 1e-8),
        mekf_belief(R0, np.zeros(3), init_g, 1e-8),
        Sigma_m=noise_g.Sigma, F_Z=cfg.meas_noise.F,
    )
    assert np.max(angles_between(est["analytical"], est["mekf"])) < 0.2


def test_trials_are_deterministic():
    cfg = ScenarioConfig(duration=1.0, seed=9)
    a, b = run_trial(cfg, 2), run_trial(cfg, 2)
    assert a.stream_hash == b.stream_hash
    for name in cfg.filters:
        assert a.attitude_error[name].tobytes() == b.attitude_error[name].tobytes()
        assert a.bias_error[name].tobytes() == b.bias_error[name].tobytes()
        assert a.attitude_sd[name].tobytes() == b.attitude_sd[name].tobytes()
