"""Propagation of an MFG over one step of the gyro kinematics

    R_{k+1} = R_k exp(h (Omega + x_k)^ + (H_u dW_u)^),   x_{k+1} = x_k + H_v dW_v,

either by first-order moment propagation (analytical) or by an unscented
transform over MFG and Gaussian sigma points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matrix_fisher as mfish
from .matrix_fisher import InvalidMomentError
from .mfg import (
    InvalidParameterError,
    MFGParams,
    conditional_mle,
    decanonicalize,
    marginal_mle,
    mle,
    sqrtm_psd,
    sym,
)
from .so3 import exp_so3, hat, vee_skew

COS_THETA_LIMIT = -np.sqrt(3.0) / 2.0


class PropagationError(RuntimeError):
    """Raised when propagated moments cannot be matched to an MFG."""


@dataclass(frozen=True)
class GyroNoiseModel:
    """Angle random walk G_u, bias random walk G_v and step h (SI units)."""

    G_u: np.ndarray
    G_v: np.ndarray
    h: float

    def __post_init__(self):
        G_u = sym(np.asarray(self.G_u, dtype=float).reshape(3, 3))
        G_v = sym(np.asarray(self.G_v, dtype=float).reshape(3, 3))
        for name, G in (("G_u", G_u), ("G_v", G_v)):
            if np.min(np.linalg.eigvalsh(G)) < -1e-12 * max(1.0, np.abs(G).max()):
                raise ValueError(f"{name} must be positive semidefinite")
        if not self.h > 0:
            raise ValueError("h must be positive")
        object.__setattr__(self, "G_u", G_u)
        object.__setattr__(self, "G_v", G_v)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def isotropic(cls, sigma_u, sigma_v, h):
        return cls(sigma_u**2 * np.eye(3), sigma_v**2 * np.eye(3), h)


def discrete_step(R, x, Omega, model, rng):
    """One stochastic step; ``R`` (..., 3, 3) and ``x`` (..., 3) may be batched."""
    R = np.asarray(R, dtype=float)
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    Lu = sqrtm_psd(model.h * model.G_u)
    Lv = sqrtm_psd(model.h * model.G_v)
    du = rng.standard_normal(shape + (3,)) @ Lu
    dv = rng.standard_normal(shape + (3,)) @ Lv
    R_next = R @ exp_so3(model.h * (np.asarray(Omega) + x) + du)
    return R_next, x + dv


# --------------------------------------------------------------------------
# linear maps of Q (row-major flattening q = vec(Q), index 3 i + j)

_BASIS = np.eye(9).reshape(9, 3, 3)


def _linear_map(f):
    """Matrix of a linear function of Q, evaluated on the basis E_a."""
    cols = [np.ravel(f(E)) for E in _BASIS]
    return np.stack(cols, axis=-1)


def gamma_q(S_tilde, Q):
    """(tr(Q St^T) I - Q St^T) Q written with cofactors, so it is linear in Q on SO(3)."""
    s = np.asarray(S_tilde, dtype=float)
    q = np.asarray(Q, dtype=float)

    def Q_(i, j):
        return q[..., i - 1, j - 1]

    def S_(i, j):
        return s[i - 1, j - 1]

    G = np.empty(q.shape[:-2] + (3, 3))
    G[..., 0, 0] = S_(2, 2) * Q_(3, 3) + S_(3, 3) * Q_(2, 2) - S_(2, 3) * Q_(3, 2) - S_(3, 2) * Q_(2, 3)
    G[..., 0, 1] = S_(2, 3) * Q_(3, 1) + S_(3, 1) * Q_(2, 3) - S_(2, 1) * Q_(3, 3) - S_(3, 3) * Q_(2, 1)
    G[..., 0, 2] = S_(2, 1) * Q_(3, 2) + S_(3, 2) * Q_(2, 1) - S_(2, 2) * Q_(3, 1) - S_(3, 1) * Q_(2, 2)
    G[..., 1, 0] = S_(1, 3) * Q_(3, 2) + S_(3, 2) * Q_(1, 3) - S_(1, 2) * Q_(3, 3) - S_(3, 3) * Q_(1, 2)
    G[..., 1, 1] = S_(1, 1) * Q_(3, 3) + S_(3, 3) * Q_(1, 1) - S_(1, 3) * Q_(3, 1) - S_(3, 1) * Q_(1, 3)
    G[..., 1, 2] = S_(1, 2) * Q_(3, 1) + S_(3, 1) * Q_(1, 2) - S_(1, 1) * Q_(3, 2) - S_(3, 2) * Q_(1, 1)
    G[..., 2, 0] = S_(1, 2) * Q_(2, 3) + S_(2, 3) * Q_(1, 2) - S_(1, 3) * Q_(2, 2) - S_(2, 2) * Q_(1, 3)
    G[..., 2, 1] = S_(1, 3) * Q_(2, 1) + S_(2, 1) * Q_(1, 3) - S_(1, 1) * Q_(2, 3) - S_(2, 3) * Q_(1, 1)
    G[..., 2, 2] = S_(1, 1) * Q_(2, 2) + S_(2, 2) * Q_(1, 1) - S_(1, 2) * Q_(2, 1) - S_(2, 1) * Q_(1, 2)
    return G


def gamma_q_definition(S_tilde, Q):
    M = np.asarray(Q) @ np.asarray(S_tilde).T
    return (np.trace(M) * np.eye(3) - M) @ Q


def _bilinear_tensor(f):
    """T[..., q, s] with f(S, Q) = (T @ vec(S)) @ vec(Q) for f bilinear in (S, Q)."""
    cols = [[np.asarray(f(Es, Eq)) for Eq in _BASIS] for Es in _BASIS]
    return np.moveaxis(np.array(cols), (0, 1), (-1, -2))


_NU_TENSOR = _bilinear_tensor(lambda S, Q: vee_skew(Q @ S.T - S @ Q.T))  # (3, 9, 9)
_GAMMA_TENSOR = _bilinear_tensor(gamma_q)  # (3, 3, 9, 9)
_HAT_BASIS = hat(np.eye(3))  # _HAT_BASIS[l] = hat(e_l)


def _nu_tilde_map(St):
    """3x9 matrix L with (Q St^T - St Q^T)^vee = L vec(Q)."""
    return _NU_TENSOR @ np.ravel(St)


def _nu_map(S):
    return _nu_tilde_map(np.diag(S))


def _gamma_map(St):
    """(3, 3, 9) array G with gamma_q(St, Q)[i, j] = G[i, j] @ vec(Q)."""
    return _GAMMA_TENSOR @ np.ravel(St)


@dataclass(frozen=True)
class PropagationIntermediates:
    U_t: np.ndarray
    V_t: np.ndarray
    V_tt: np.ndarray
    S_t: np.ndarray
    S_tt: np.ndarray


def _expected_R(params, model, dR, m):
    """First-order mean attitude after one step."""
    U, V, P, h = params.U, params.V, params.P, model.h
    G = model.G_u
    ER = params.U @ m.first @ params.V.T
    C = V.T @ P @ _nu_map(params.S)  # V^T P nu = C q
    # E[Q hat(C q)]: (Q hat(c))_ij = sum_k Q_ik hat(c)_kj
    Hc = np.tensordot(_HAT_BASIS, C, axes=(0, 0))  # (k, j, b)
    EQc = np.tensordot(m.second.reshape(3, 3, 9), Hc, axes=([1, 2], [0, 2]))
    corr = ER @ (np.eye(3) + 0.5 * h * (G - np.trace(G) * np.eye(3))) + h * U @ EQc @ V.T
    return corr @ dR


def propagate_analytical(params, Omega, model):
    """Moment-matched MFG after one step, accurate to first order in h."""
    if params.n != 3:
        raise InvalidParameterError("the gyro model needs n = 3")
    h = model.h
    Omega = np.asarray(Omega, dtype=float)
    dR = exp_so3(h * (Omega + params.mu))
    m = mfish.q_moments(params.S, 3)
    ER1 = _expected_R(params, model, dR, m)
    try:
        U1, S1, V1 = marginal_mle(ER1, params.convention, S0=params.S)
    except InvalidMomentError as exc:
        raise PropagationError(f"propagated E[R] is not attainable: {exc}") from exc

    U, S, V, P, mu = params.U, params.S, params.V, params.P, params.mu
    G = model.G_u
    trG = np.trace(G)
    Ut = U1.T @ U
    Vt = V1.T @ dR.T @ V
    St = Ut.T @ np.diag(S1) @ Vt
    Vtt = V1.T @ dR.T @ G @ V
    Stt = Ut.T @ np.diag(S1) @ Vtt

    q1 = m.first.reshape(9)
    M2 = m.second
    M3 = m.third
    L_nu = _nu_map(S)
    L_t = _nu_tilde_map(St)
    L_tt = _nu_tilde_map(Stt)
    Gm = _gamma_map(St)  # Gamma_ij = Gm[i, j, :] q
    C = V.T @ P @ L_nu  # V^T P nu = C q
    Gt = V.T @ G @ V

    Sigma_c = params.Sigma_c
    E_gamma = Gm @ q1
    # (Gamma V^T P nu)_i = q^T Gc[i] q
    Gc = np.swapaxes(Gm, 1, 2) @ C
    Gc_flat = Gc.reshape(3, 81)
    E_gc = Gc_flat @ M2.ravel()
    M3_flat = M3.reshape(9, 81)

    def cross3(L):
        # E[(L q) (Gamma V^T P nu)^T]
        return (L @ M3_flat) @ Gc_flat.T

    E_nu_nut = L_nu @ M2 @ L_t.T
    E_nu_nutt = L_nu @ M2 @ L_tt.T
    E_nut = L_t @ q1
    E_nutt = L_tt @ q1
    E_nunu = L_nu @ M2 @ L_nu.T

    Exnu = (
        h * Sigma_c @ V @ E_gamma.T
        + np.outer(mu, E_nut + 0.5 * h * E_nutt - 0.5 * h * trG * E_nut + h * E_gc)
        + P @ (E_nu_nut + 0.5 * h * E_nu_nutt - 0.5 * h * trG * E_nu_nut + h * cross3(L_nu))
    ) @ Ut.T

    E_t_t = L_t @ M2 @ L_t.T
    E_t_tt = L_t @ M2 @ L_tt.T
    X = h * cross3(L_t)
    # E[Gamma Gt Gamma^T]
    E_gGg = (Gm @ M2).reshape(3, 27) @ (Gt @ Gm).reshape(3, 27).T
    Enunu = Ut @ (
        E_t_t * (1.0 - h * trG) + 0.5 * h * (E_t_tt + E_t_tt.T) + X + X.T + h * E_gGg
    ) @ Ut.T

    Exx = Sigma_c + np.outer(mu, mu) + P @ E_nunu @ P.T + h * model.G_v
    mu1, Sigma1, P1 = conditional_mle(S1, mu, Exx, Exnu, sym(Enunu), np.zeros(3))
    out = MFGParams(mu1, Sigma1, P1, U1, S1, V1, params.convention)
    return out


# --------------------------------------------------------------------------
# sigma points


@dataclass(frozen=True)
class UnscentedConfig:
    w_M: float = 0.5
    w_G: float = 0.4
    cos_theta_l: float = COS_THETA_LIMIT

    @property
    def w_0(self):
        return 1.0 - self.w_M - self.w_G


@dataclass(frozen=True)
class SigmaPointSet:
    R: np.ndarray  # (N, 3, 3)
    x: np.ndarray  # (N, n)
    w: np.ndarray  # (N,)
    theta: np.ndarray  # rotation angles of the attitude pairs
    sigma: float
    config: UnscentedConfig


def _cos_theta_coeffs(S, log_c):
    """cos(theta_i) = a_i + b_i * sigma for each principal axis."""
    a = np.empty(3)
    b = np.empty(3)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        sjk = S[j] + S[k]
        r = log_c - S[i]
        if sjk >= 1.0:
            # sigma + (1 - sigma) r / sjk
            a[i] = r / sjk
            b[i] = 1.0 - r / sjk
        else:
            # (sigma + (1 - sigma) r + 1/2) sjk - 1/2
            a[i] = (r + 0.5) * sjk - 0.5
            b[i] = (1.0 - r) * sjk
    return a, b


def _attitude_weights(S, cos_t, nb):
    """Weight of each attitude sigma-point pair; ``cos_t`` may carry leading axes."""
    d = nb.d
    num = np.array([d[0] - d[1] - d[2], d[1] - d[2] - d[0], d[2] - d[0] - d[1]]) + 1.0
    return num / (4.0 * (1.0 - cos_t))


def _solve_sigma(a, b, S, nb, w_M, tol=1e-12, grid=1024):
    """Smallest sigma in [0, 1] with total attitude weight w_M.

    The total weight is increasing in sigma, so each pass evaluates it on a grid
    over the current bracket and keeps the cell where it crosses w_M.
    """

    def total(sig):
        c = np.minimum(a + b * sig[..., None], 1.0 - 1e-15)
        return 2.0 * np.sum(_attitude_weights(S, c, nb), axis=-1)

    lo, hi = 0.0, 1.0
    if total(np.array(lo)) >= w_M:
        return 0.0
    while hi - lo > tol:
        pts = np.linspace(lo, hi, grid + 1)
        k = int(np.searchsorted(total(pts) >= w_M, True))
        if k > grid:
            return hi
        lo, hi = pts[max(k - 1, 0)], pts[k]
    return 0.5 * (lo + hi)


def sigma_points(params, config=None):
    """7 + 2n weighted (R, x) points whose marginal-conditional MLE is ``params``."""
    config = UnscentedConfig() if config is None else config
    if not (config.w_M > 0 and config.w_G > 0 and config.w_M + config.w_G < 1):
        raise InvalidParameterError("need w_M, w_G > 0 and w_M + w_G < 1")
    S = params.S
    nb = params.normalizer()
    a, b = _cos_theta_coeffs(S, nb.log_c)
    sig = _solve_sigma(a, b, S, nb, config.w_M)
    # keep every angle inside the limit cone
    with np.errstate(divide="ignore", invalid="ignore"):
        sig_l = np.where(b > 0, (config.cos_theta_l - a) / b, -np.inf)
    sig = float(max(sig, np.max(sig_l)))
    cos_t = np.clip(a + b * sig, -1.0, 1.0)
    if np.any(cos_t >= 1.0):
        raise InvalidParameterError("degenerate sigma-point angle")
    w_att = _attitude_weights(S, cos_t, nb)
    # weight left for the points at Q = I; the angle clamp can push the attitude
    # pairs past w_M, and then w_G and w_0 shrink in proportion
    rest = 1.0 - 2.0 * np.sum(w_att)
    if np.any(w_att <= 0) or rest <= 1e-9:
        raise InvalidParameterError(
            f"infeasible sigma-point weights (attitude pairs take {1.0 - rest:.3g})"
        )
    shrink = min(1.0, rest / (1.0 - config.w_M))
    w_G = config.w_G * shrink
    w_0 = max(rest - w_G, 0.0)
    theta = np.arccos(cos_t)
    n = params.n
    Qs = list(exp_so3(np.kron(np.diag(theta), [[1.0], [-1.0]])))
    ys = [np.zeros(n)] * 6
    ws = list(np.repeat(w_att, 2))
    r = np.sqrt(n / w_G)
    for i in range(n):
        for sgn in (1.0, -1.0):
            y = np.zeros(n)
            y[i] = sgn * r
            Qs.append(np.eye(3))
            ys.append(y)
            ws.append(w_G / (2 * n))
    Qs.append(np.eye(3))
    ys.append(np.zeros(n))
    ws.append(w_0)
    R, x = decanonicalize(params, np.array(Qs), np.array(ys))
    return SigmaPointSet(R, x, np.array(ws), theta, sig, config)


def gaussian_sigma_points(cov):
    """Seven equally weighted points with zero mean and covariance ``cov`` (3x3)."""
    L = sqrtm_psd(cov)
    r = np.sqrt(3.5)
    pts = [np.zeros(3)]
    for i in range(3):
        pts.append(r * L[:, i])
        pts.append(-r * L[:, i])
    return np.array(pts), np.full(7, 1.0 / 7.0)


def propagate_unscented(params, Omega, model, config=None):
    """Unscented propagation: 13 x 7 propagated sigma points refit by MLE."""
    if params.n != 3:
        raise InvalidParameterError("the gyro model needs n = 3")
    sp = sigma_points(params, config)
    noise, wn = gaussian_sigma_points(model.h * model.G_u)
    h = model.h
    Omega = np.asarray(Omega, dtype=float)
    xi = h * (Omega + sp.x)[:, None, :] + noise[None, :, :]
    R = sp.R[:, None] @ exp_so3(xi)
    x = np.broadcast_to(sp.x[:, None, :], xi.shape)
    w = (sp.w[:, None] * wn[None, :]).ravel()
    try:
        out = mle(R.reshape(-1, 3, 3), x.reshape(-1, 3), w, params.convention, S0=params.S)
    except InvalidMomentError as exc:
        raise PropagationError(f"sigma-point refit failed: {exc}") from exc
    return MFGParams(out.mu, out.Sigma + h * model.G_v, out.P, out.U, out.S, out.V, out.convention)
