"""Monte-Carlo comparison rig: truth trajectories, sensor streams, trials, batches, statistics."""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .filters import (
    FilterError,
    MEKFState,
    MFGFilterState,
    MeasurementNoiseSpec,
    as_gaussian,
    as_matrix_fisher,
    error_metrics,
    mekf_step,
    mekf_uncertainty,
    mfg_filter_step,
    mfg_uncertainty,
)
from .measurement import AttitudeMeasurement
from .mfg import MFGParams
from .propagation import GyroNoiseModel, UnscentedConfig
from .so3 import euler_321, exp_so3, log_so3_batch, proper_svd

DEG = np.pi / 180.0
# gyro noise levels of the reference study, converted to SI
SIGMA_U_DEFAULT = 10.0 * DEG  # rad / sqrt(s)
SIGMA_V_DEFAULT = 500.0 * DEG / 3600.0  # rad / s / sqrt(s)

FILTER_NAMES = ("mfg_analytical", "mfg_unscented", "mekf")


class ConfigError(ValueError):
    """Scenario configuration is invalid."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario. All quantities in SI units (rad, s, Hz)."""

    euler_amplitudes: tuple = (np.pi, np.pi / 2.0, np.pi)
    frequency: float = 0.35
    sigma_u: float = SIGMA_U_DEFAULT
    sigma_v: float = SIGMA_V_DEFAULT
    gyro_rate: float = 150.0
    meas_rate: float = 30.0
    duration: float = 60.0
    # attitude sensor: the model that generates the data
    meas_noise: MeasurementNoiseSpec = field(
        default_factory=lambda: MeasurementNoiseSpec.gaussian_rotvec(0.2**2 * np.eye(3))
    )
    # "small": estimate drawn from the sensor error model and bias prior around the truth
    # "large": estimate rotated by pi about body axis 1 with a falsely tight prior
    init: str = "small"
    init_bias_sd: float = 0.1
    large_init_S0: float = 200.0
    large_init_bias: float = 0.2
    large_init_bias_sd: float = 0.1
    trials: int = 10
    seed: int = 0
    filters: tuple = FILTER_NAMES
    w_M: float = 0.5
    w_G: float = 0.4

    def __post_init__(self):
        amps = tuple(float(a) for a in self.euler_amplitudes)
        object.__setattr__(self, "euler_amplitudes", amps)
        if len(amps) != 3:
            raise ConfigError("euler_amplitudes needs three values")
        for name in ("gyro_rate", "meas_rate", "duration", "frequency"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        ratio = self.gyro_rate / self.meas_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("gyro_rate must be a multiple of meas_rate")
        if self.sigma_u < 0 or self.sigma_v < 0:
            raise ConfigError("noise strengths must be non-negative")
        if self.init not in ("small", "large"):
            raise ConfigError("init must be 'small' or 'large'")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        unknown = set(self.filters) - set(FILTER_NAMES)
        if unknown:
            raise ConfigError(f"unknown filters {sorted(unknown)}")

    @property
    def h(self):
        return 1.0 / self.gyro_rate

    @property
    def n_steps(self):
        return int(round(self.duration * self.gyro_rate))

    @property
    def meas_every(self):
        return int(round(self.gyro_rate / self.meas_rate))

    def noise_model(self):
        return GyroNoiseModel.isotropic(self.sigma_u, self.sigma_v, self.h)


# --------------------------------------------------------------------------
# truth and sensors


@dataclass(frozen=True)
class Truth:
    t: np.ndarray  # (K+1,)
    R: np.ndarray  # (K+1, 3, 3)
    x: np.ndarray  # (K+1, 3) gyro bias
    omega: np.ndarray  # (K, 3) body rate over [t_k, t_k+1]
    Omega: np.ndarray  # (K, 3) gyro output


def euler_attitudes(config, t):
    a = config.euler_amplitudes
    phase = np.sin(2.0 * np.pi * config.frequency * np.asarray(t))
    return np.array([euler_321(a[0] * s, a[1] * s, a[2] * s) for s in phase])


def generate_truth(config, rng):
    """Attitude from 3-2-1 Euler sinusoids, Wiener bias, and the matching gyro stream.

    The body rate of step k is log(R_k^T R_{k+1}) / h, so the generated gyro
    output satisfies R_{k+1} = R_k exp(h (Omega_k + x_k) + noise_k) exactly and
    stays well defined through pitch = +-pi/2.
    """
    K, h = config.n_steps, config.h
    t = np.arange(K + 1) * h
    R = euler_attitudes(config, t)
    omega = log_so3_batch(np.einsum("kji,kjl->kil", R[:-1], R[1:])) / h
    dv = rng.standard_normal((K, 3)) * (config.sigma_v * np.sqrt(h))
    x = np.vstack([np.zeros(3), np.cumsum(dv, axis=0)])
    du = rng.standard_normal((K, 3)) * (config.sigma_u * np.sqrt(h))
    Omega = omega - x[:-1] - du / h
    return Truth(t, R, x, omega, Omega)


def attitude_measurements(config, truth, rng):
    """{step index: Z} at the measurement rate, t > 0."""
    idx = np.arange(config.meas_every, config.n_steps + 1, config.meas_every)
    dR = config.meas_noise.sample_error(rng, idx.size)
    return {int(k): truth.R[k] @ dR[i] for i, k in enumerate(idx)}


def _stream_hash(truth, meas):
    hsh = hashlib.sha256(np.ascontiguousarray(truth.Omega).tobytes())
    for k in sorted(meas):
        hsh.update(np.ascontiguousarray(meas[k]).tobytes())
    return hsh.hexdigest()


# --------------------------------------------------------------------------
# initial beliefs


@dataclass(frozen=True)
class InitialBeliefs:
    mfg: MFGParams
    mekf: MEKFState


def initial_beliefs(config, truth, rng, noise_mf, noise_g):
    R0 = truth.R[0]
    if config.init == "small":
        R_hat = R0 @ config.meas_noise.sample_error(rng)
        x_hat = rng.standard_normal(3) * config.init_bias_sd
        F0 = R_hat @ noise_mf.F
        att_cov = noise_g.Sigma
        bias_var = config.init_bias_sd**2
    else:
        R_hat = R0 @ exp_so3(np.array([np.pi, 0.0, 0.0]))
        x_hat = np.full(3, config.large_init_bias)
        S0 = MeasurementNoiseSpec.matrix_fisher(np.full(3, config.large_init_S0))
        F0 = R_hat @ S0.F
        att_cov = as_gaussian(S0).Sigma
        bias_var = config.large_init_bias_sd**2
    svd = proper_svd(F0)
    params = MFGParams(x_hat, bias_var * np.eye(3), np.zeros((3, 3)), svd.U, svd.S, svd.V)
    Pcov = np.zeros((6, 6))
    Pcov[:3, :3] = att_cov
    Pcov[3:, 3:] = bias_var * np.eye(3)
    return InitialBeliefs(params.validate(), MEKFState(R_hat, x_hat.copy(), Pcov))


# --------------------------------------------------------------------------
# trials


@dataclass
class TrialResult:
    t: np.ndarray
    attitude_error: dict  # filter -> (K+1,) degrees
    bias_error: dict  # filter -> (K+1,) deg/s
    attitude_sd: dict  # filter -> (K+1,) rad, inertial axis 1
    bias_sd: dict  # filter -> (K+1,) rad/s, axis 3
    failures: dict  # filter -> step index of failure
    stream_hash: str

    def time_average(self, name, which="attitude"):
        series = self.attitude_error[name] if which == "attitude" else self.bias_error[name]
        return float(np.mean(series))


def _trial_rng(config, index):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(index,)))


def run_trial(config, index=0, rng=None):
    """All requested filters on one shared sensor stream."""
    rng = _trial_rng(config, index) if rng is None else rng
    truth = generate_truth(config, rng)
    meas = attitude_measurements(config, truth, rng)
    noise_mf = as_matrix_fisher(config.meas_noise)
    noise_g = as_gaussian(config.meas_noise)
    init = initial_beliefs(config, truth, rng, noise_mf, noise_g)
    model = config.noise_model()
    ut = UnscentedConfig(config.w_M, config.w_G)
    K = config.n_steps

    out = TrialResult(truth.t, {}, {}, {}, {}, {}, _stream_hash(truth, meas))
    for name in config.filters:
        att = np.full(K + 1, np.nan)
        bias = np.full(K + 1, np.nan)
        att_sd = np.full(K + 1, np.nan)
        bias_sd = np.full(K + 1, np.nan)
        if name == "mekf":
            state = init.mekf
            uncertainty = mekf_uncertainty
        else:
            state = MFGFilterState(init.mfg)
            backend = name.split("_", 1)[1]

            def uncertainty(s):
                return mfg_uncertainty(s.params)

        att[0], bias[0] = error_metrics(state.attitude, state.bias, truth.R[0], truth.x[0])
        att_sd[0], bias_sd[0] = uncertainty(state)
        try:
            for k in range(K):
                Z = meas.get(k + 1)
                if name == "mekf":
                    am = () if Z is None else (AttitudeMeasurement(Z, np.zeros((3, 3))),)
                    state = mekf_step(state, truth.Omega[k], model, am, Sigma_m=noise_g.Sigma)
                else:
                    am = () if Z is None else (AttitudeMeasurement(Z, noise_mf.F),)
                    state = mfg_filter_step(state, truth.Omega[k], model, backend, am, config=ut)
                att[k + 1], bias[k + 1] = error_metrics(
                    state.attitude, state.bias, truth.R[k + 1], truth.x[k + 1]
                )
                att_sd[k + 1], bias_sd[k + 1] = uncertainty(state)
        except FilterError as exc:
            out.failures[name] = exc.step
        out.attitude_error[name] = att
        out.bias_error[name] = bias
        out.attitude_sd[name] = att_sd
        out.bias_sd[name] = bias_sd
    return out


# --------------------------------------------------------------------------
# batches and statistics


def paired_t_test(a, b):
    """Two-sided p-value of the paired t-test of mean(a - b) = 0."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    n = d.size
    if n < 2 or np.asarray(b).shape != np.asarray(a).shape:
        raise ValueError("need two equal-length series of at least two values")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / np.sqrt(n))
    return t_two_sided_p(t, n - 1)


def t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    x = df / (df + t * t)
    return float(betainc(0.5 * df, 0.5, x))


@dataclass
class BatchSummary:
    names: tuple
    attitude_mean: dict
    attitude_sd: dict
    bias_mean: dict
    bias_sd: dict
    p_attitude: dict  # MFG variant -> p vs MEKF
    p_bias: dict
    per_trial_attitude: dict  # filter -> (N,) time-averaged errors
    per_trial_bias: dict
    failures: list = field(default_factory=list)  # (trial, filter, step)

    def rows(self):
        """Table rows: filter, attitude mean, sd, p, bias mean, sd, p."""
        out = []
        for name in self.names:
            out.append(
                (
                    name,
                    self.attitude_mean[name],
                    self.attitude_sd[name],
                    self.p_attitude.get(name, np.nan),
                    self.bias_mean[name],
                    self.bias_sd[name],
                    self.p_bias.get(name, np.nan),
                )
            )
        return out


def summarize(results, names):
    att = {n: np.array([r.time_average(n, "attitude") for r in results]) for n in names}
    bias = {n: np.array([r.time_average(n, "bias") for r in results]) for n in names}
    failures = [(i, n, s) for i, r in enumerate(results) for n, s in r.failures.items()]
    p_att, p_bias = {}, {}
    if "mekf" in names and len(results) >= 2:
        for n in names:
            if n == "mekf":
                continue
            ok = np.isfinite(att[n]) & np.isfinite(att["mekf"])
            if ok.sum() >= 2:
                p_att[n] = paired_t_test(att[n][ok], att["mekf"][ok])
                p_bias[n] = paired_t_test(bias[n][ok], bias["mekf"][ok])

    def sd(v):
        v = v[np.isfinite(v)]
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    return BatchSummary(
        tuple(names),
        {n: float(np.nanmean(att[n])) for n in names},
        {n: sd(att[n]) for n in names},
        {n: float(np.nanmean(bias[n])) for n in names},
        {n: sd(bias[n]) for n in names},
        p_att,
        p_bias,
        att,
        bias,
        failures,
    )


def _run_indexed(args):
    config, index = args
    return run_trial(config, index)


def run_batch(config, workers=1, keep_trials=False):
    """``config.trials`` independent trials; per-trial RNG streams derive from ``config.seed``."""
    jobs = [(config, i) for i in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_indexed, jobs))
    else:
        results = [_run_indexed(j) for j in jobs]
    summary = summarize(results, config.filters)
    return (summary, results) if keep_trials else summary
