"""Attitude and reference-vector measurements and the MFG measurement update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matrix_fisher as mfish
from .matrix_fisher import InvalidMomentError, MatrixFisher
from .mfg import MFGParams, conditional_mle, sym
from .propagation import _nu_map, _nu_tilde_map
from .so3 import is_rotation, proper_svd

_UNIT_TOL = 1e-9


class MeasurementUpdateError(ArithmeticError):
    """Posterior moments could not be turned into valid MFG parameters."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AttitudeMeasurement:
    """Measured attitude Z whose error R_true^T Z follows M(F_Z)."""

    Z: np.ndarray
    F_Z: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        F = np.asarray(self.F_Z, dtype=float)
        if not is_rotation(Z, tol=1e-8):
            raise ValueError("Z must be a rotation matrix")
        if F.shape != (3, 3) or not np.all(np.isfinite(F)):
            raise ValueError("F_Z must be a finite 3x3 matrix")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "F_Z", F)


@dataclass(frozen=True)
class VectorMeasurement:
    """Body-frame direction z of the inertial unit vector a, seen through sensor rotation B."""

    z: np.ndarray
    a: np.ndarray
    kappa: float
    B: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        a = np.asarray(self.a, dtype=float)
        B = np.asarray(self.B, dtype=float)
        for name, v in (("z", z), ("a", a)):
            if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
                raise ValueError(f"{name} must be a unit 3-vector")
        if not is_rotation(B, tol=1e-8):
            raise ValueError("B must be a rotation matrix")
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError("kappa must be finite and non-negative")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "kappa", float(self.kappa))


def posterior_F(prior_F, attitude_meas=(), vector_meas=()):
    F = np.array(prior_F, dtype=float)
    for m in attitude_meas:
        F += m.Z @ m.F_Z.T
    for m in vector_meas:
        F += m.kappa * np.outer(m.B @ m.a, m.z)
    return F


@dataclass(frozen=True)
class PosteriorMoments:
    """Moments of the exact posterior, with nu^+ taken about the posterior (U+, S+, V+)."""

    ER: np.ndarray
    Ex: np.ndarray
    Enu: np.ndarray
    Exx: np.ndarray
    Exnu: np.ndarray
    Enunu: np.ndarray


def posterior_moments(params, F_plus):
    """Exact moments of the posterior density prior x likelihood(F_plus - F).

    The attitude marginal of the posterior is M(F_plus); the old tangent
    deviation nu_R is linear in Q+ = U+^T R V+, so every moment below is a
    linear image of the first two canonical moments at S+.
    """
    svd = proper_svd(F_plus, params.convention)
    Up, Sp, Vp = svd.U, svd.S, svd.V
    m = mfish.q_moments(Sp, 2)
    Eq, M2 = np.ravel(m.first), m.second

    Ut = params.U.T @ Up
    Vt = params.V.T @ Vp
    St = Ut.T @ np.diag(params.S) @ Vt
    L_old = Ut @ _nu_tilde_map(St)  # nu_R = L_old q+
    L_new = _nu_map(Sp)  # nu_R+ = L_new q+

    Enu_old = L_old @ Eq
    Enn_old = L_old @ M2 @ L_old.T
    Eon = L_old @ M2 @ L_new.T
    Enu_new = L_new @ Eq
    Enn_new = L_new @ M2 @ L_new.T

    mu, P = params.mu, params.P
    Ex = mu + P @ Enu_old
    Pn = np.outer(P @ Enu_old, mu)
    Exx = np.outer(mu, mu) + Pn + Pn.T + P @ Enn_old @ P.T + params.Sigma_c
    Exnu = np.outer(mu, Enu_new) + P @ Eon
    ER = Up @ Eq.reshape(3, 3) @ Vp.T
    return svd, PosteriorMoments(ER, Ex, Enu_new, sym(Exx), Exnu, sym(Enn_new))


def update(params: MFGParams, attitude_meas=(), vector_meas=()) -> MFGParams:
    """Bayes update with all given measurements fused into one F+, then a conditional refit."""
    F_plus = posterior_F(params.F, attitude_meas, vector_meas)
    if not np.all(np.isfinite(F_plus)):
        raise MeasurementUpdateError("posterior F is not finite", {"F_plus": F_plus})
    try:
        svd, pm = posterior_moments(params, F_plus)
        mu, Sigma, P = conditional_mle(svd.S, pm.Ex, pm.Exx, pm.Exnu, pm.Enunu, pm.Enu)
        out = MFGParams(mu, Sigma, P, svd.U, svd.S, svd.V, params.convention)
        out.validate()
    except (InvalidMomentError, ValueError, np.linalg.LinAlgError) as exc:
        raise MeasurementUpdateError(
            f"measurement update failed: {exc}",
            {"F_plus": F_plus, "prior_S": params.S, "prior_Sigma": params.Sigma},
        ) from exc
    return out


def sample_attitude_measurement(R_true, F_Z, rng, size=None):
    """Z = R_true dR with dR ~ M(F_Z); ``size`` draws a stack of independent readings."""
    dR = MatrixFisher(np.asarray(F_Z, dtype=float)).sample(rng, size)
    return np.asarray(R_true) @ dR


def _orthonormal_complement(m):
    k = int(np.argmin(np.abs(m)))
    e = np.zeros(3)
    e[k] = 1.0
    b1 = np.cross(m, e)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(m, b1)


def sample_vmf(mean_dir, kappa, rng, size=None):
    """von Mises-Fisher draws on the unit sphere by inverting the CDF of the polar cosine."""
    m = np.asarray(mean_dir, dtype=float)
    m = m / np.linalg.norm(m)
    n = 1 if size is None else int(size)
    u = rng.random(n)
    if kappa < 1e-10:
        w = 2.0 * u - 1.0
    else:
        # u uniform on [0,1): w = 1 + log(u + (1-u) exp(-2 kappa)) / kappa, rewritten for stability
        w = 1.0 + np.log1p((1.0 - u) * np.expm1(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    phi = 2.0 * np.pi * rng.random(n)
    b1, b2 = _orthonormal_complement(m)
    r = np.sqrt(1.0 - w * w)
    z = w[:, None] * m + r[:, None] * (np.cos(phi)[:, None] * b1 + np.sin(phi)[:, None] * b2)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z[0] if size is None else z


def sample_vector_measurement(R_true, a, kappa, rng, B=None, size=None):
    """Body-frame reading of inertial direction a with mean R_true^T B a."""
    B = np.eye(3) if B is None else np.asarray(B, dtype=float)
    mean = np.asarray(R_true).T @ B @ np.asarray(a, dtype=float)
    return sample_vmf(mean, kappa, rng, size)


def vmf_mean_resultant_length(kappa):
    """coth(kappa) - 1/kappa, with a series near zero."""
    if kappa < 1e-4:
        return kappa / 3.0
    return 1.0 / np.tanh(kappa) - 1.0 / kappa
