"""MFG Bayesian attitude/bias filter, the multiplicative EKF baseline, and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matrix_fisher as mfish
from .measurement import AttitudeMeasurement, update
from .mfg import MFGParams, nu_second_moment, sym
from .propagation import propagate_analytical, propagate_unscented
from .so3 import exp_so3, hat, log_so3, log_so3_batch, proper_svd

# seed of the sample-based noise-model conversion, shared by every trial
CONVERSION_SEED = 20190907
CONVERSION_SAMPLES = 100_000

BACKENDS = ("analytical", "unscented")


class FilterError(RuntimeError):
    """A filter step failed; ``step`` is the index of the step being computed."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


# --------------------------------------------------------------------------
# measurement noise models


@dataclass(frozen=True)
class MeasurementNoiseSpec:
    """Attitude-sensor error model.

    ``matrix_fisher``: Z = R dR with dR ~ M(F); ``F`` may be given as its diagonal.
    ``gaussian_rotvec``: Z = R exp(hat(d)) with d ~ N(0, Sigma).
    """

    kind: str
    F: np.ndarray | None = None
    Sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "matrix_fisher":
            F = np.asarray(self.F, dtype=float)
            F = np.diag(F) if F.shape == (3,) else F
            if F.shape != (3, 3) or not np.all(np.isfinite(F)):
                raise ValueError("matrix_fisher noise needs a finite 3x3 F (or diagonal 3-vector)")
            object.__setattr__(self, "F", F)
        elif self.kind == "gaussian_rotvec":
            Sig = np.asarray(self.Sigma, dtype=float)
            Sig = np.diag(Sig) if Sig.shape == (3,) else Sig
            if Sig.shape != (3, 3) or not np.allclose(Sig, Sig.T):
                raise ValueError("gaussian_rotvec noise needs a symmetric 3x3 Sigma")
            if np.min(np.linalg.eigvalsh(Sig)) <= 0:
                raise ValueError("Sigma must be positive definite")
            object.__setattr__(self, "Sigma", Sig)
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def matrix_fisher(cls, S_m):
        return cls("matrix_fisher", F=np.asarray(S_m, dtype=float))

    @classmethod
    def gaussian_rotvec(cls, Sigma_m):
        return cls("gaussian_rotvec", Sigma=np.asarray(Sigma_m, dtype=float))

    def sample_error(self, rng, size=None):
        """Draw dR with Z = R_true dR."""
        if self.kind == "matrix_fisher":
            return mfish.MatrixFisher(self.F).sample(rng, size)
        n = 1 if size is None else int(size)
        d = rng.multivariate_normal(np.zeros(3), self.Sigma, size=n)
        R = exp_so3(d)
        return R[0] if size is None else R


def convert_measurement_noise(spec, samples=CONVERSION_SAMPLES, seed=CONVERSION_SEED):
    """Refit a noise model in the other family by MLE on draws of the error rotation."""
    rng = np.random.default_rng(seed)
    dR = spec.sample_error(rng, samples)
    if spec.kind == "matrix_fisher":
        d = log_so3_batch(dR)
        return MeasurementNoiseSpec.gaussian_rotvec(sym(d.T @ d / samples))
    ER = dR.mean(axis=0)
    svd = proper_svd(ER)
    S = mfish.solve_s_from_d(svd.S)
    return MeasurementNoiseSpec.matrix_fisher(svd.U @ np.diag(S) @ svd.V.T)


def as_matrix_fisher(spec):
    return spec if spec.kind == "matrix_fisher" else convert_measurement_noise(spec)


def as_gaussian(spec):
    return spec if spec.kind == "gaussian_rotvec" else convert_measurement_noise(spec)


# --------------------------------------------------------------------------
# MFG filter


@dataclass(frozen=True)
class MFGFilterState:
    params: MFGParams
    t: float = 0.0
    step: int = 0

    @property
    def attitude(self):
        return self.params.U @ self.params.V.T

    @property
    def bias(self):
        return self.params.mu


def mfg_filter_step(
    state, Omega, model, backend="analytical", attitude_meas=(), vector_meas=(), config=None
):
    """Propagate over one gyro interval, then fuse any measurements taken at the new time."""
    k = state.step + 1
    try:
        if backend == "analytical":
            params = propagate_analytical(state.params, Omega, model)
        elif backend == "unscented":
            params = propagate_unscented(state.params, Omega, model, config)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        if attitude_meas or vector_meas:
            params = update(params, attitude_meas, vector_meas)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise FilterError(k, exc) from exc
    return MFGFilterState(params, state.t + model.h, k)


def mfg_uncertainty(params):
    """(attitude sd about inertial axis 1, bias sd along axis 3).

    Attitude: sqrt of [U (tr(S) I - S)^{-1} U^T]_11, the inertial-frame covariance
    of the concentrated-Gaussian approximation; inf along an axis with no information.
    Bias: sqrt of cov(x, x)_33 from the exact moments.
    """
    S = params.S
    info = np.sum(S) - S
    with np.errstate(divide="ignore"):
        var = np.where(info > 0, 1.0 / np.where(info > 0, info, 1.0), np.inf)
    att = float(np.sqrt(np.sum(params.U[0, :] ** 2 * var)))
    P = params.P
    cov_x = params.Sigma_c + P @ nu_second_moment(S) @ P.T
    return att, float(np.sqrt(max(cov_x[2, 2], 0.0)))


# --------------------------------------------------------------------------
# multiplicative EKF


@dataclass(frozen=True)
class MEKFState:
    """Right-multiplicative error R_true = R_hat exp(hat(dtheta)); bias enters as omega = Omega + bias."""

    R_hat: np.ndarray
    bias: np.ndarray
    Pcov: np.ndarray
    t: float = 0.0
    step: int = 0

    @property
    def attitude(self):
        return self.R_hat


def _checked_cov(P, step):
    P = sym(P)
    if np.min(np.linalg.eigvalsh(P)) < -1e-12 * max(1.0, np.trace(P)):
        raise FilterError(step, "MEKF covariance is indefinite")
    return P


def mekf_step(state, Omega, model, attitude_meas=(), vector_meas=(), Sigma_m=None):
    """Error-state transition, then a Joseph-form update per measurement block.

    ``Sigma_m`` is the rotation-vector covariance of the attitude measurements
    (one 3x3 matrix for all of them). Vector readings use covariance I / kappa.
    """
    k = state.step + 1
    h = model.h
    w = np.asarray(Omega, dtype=float) + state.bias
    A = exp_so3(h * w)
    R_hat = state.R_hat @ A
    Phi = np.eye(6)
    Phi[:3, :3] = A.T
    Phi[:3, 3:] = h * np.eye(3)
    Qd = np.zeros((6, 6))
    Qd[:3, :3] = h * model.G_u
    Qd[3:, 3:] = h * model.G_v
    P = _checked_cov(Phi @ state.Pcov @ Phi.T + Qd, k)
    bias = state.bias.copy()

    rows, Hs, Rs = [], [], []
    for m in attitude_meas:
        if Sigma_m is None:
            raise FilterError(k, "attitude measurement without Sigma_m")
        rows.append(log_so3(R_hat.T @ m.Z))
        H = np.zeros((3, 6))
        H[:, :3] = np.eye(3)
        Hs.append(H)
        Rs.append(np.asarray(Sigma_m, dtype=float))
    for m in vector_meas:
        pred = R_hat.T @ m.B @ m.a
        rows.append(m.z - pred)
        H = np.zeros((3, 6))
        H[:, :3] = hat(pred)
        Hs.append(H)
        Rs.append(np.eye(3) / max(m.kappa, 1e-12))
    if rows:
        y = np.concatenate(rows)
        H = np.vstack(Hs)
        Rn = np.zeros((y.size, y.size))
        for i, Rb in enumerate(Rs):
            Rn[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = Rb
        Sinn = sym(H @ P @ H.T + Rn)
        K = np.linalg.solve(Sinn, H @ P).T
        dx = K @ y
        R_hat = R_hat @ exp_so3(dx[:3])
        bias = bias + dx[3:]
        IKH = np.eye(6) - K @ H
        P = _checked_cov(IKH @ P @ IKH.T + K @ Rn @ K.T, k)
    return MEKFState(R_hat, bias, P, state.t + h, k)


def mekf_uncertainty(state):
    """(attitude sd about inertial axis 1, bias sd along axis 3)."""
    cov_att = state.R_hat @ state.Pcov[:3, :3] @ state.R_hat.T
    return float(np.sqrt(max(cov_att[0, 0], 0.0))), float(np.sqrt(max(state.Pcov[5, 5], 0.0)))


# --------------------------------------------------------------------------
# metrics


def error_metrics(R_hat, x_hat, R_true, x_true):
    """(attitude error in degrees, bias error in deg/s)."""
    att = np.linalg.norm(log_so3(np.asarray(R_hat).T @ np.asarray(R_true)))
    bias = np.linalg.norm(np.asarray(x_hat) - np.asarray(x_true))
    return float(np.degrees(att)), float(np.degrees(bias))


def attitude_measurements_from(Z, noise_mf):
    """Wrap a measured attitude for the MFG update with the sensor's matrix Fisher parameter."""
    return [AttitudeMeasurement(Z, noise_mf.F)]

