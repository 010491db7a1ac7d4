"""Matrix Fisher-Gaussian distribution on SO(3) x R^n.

The attitude marginal is matrix Fisher M(U S V^T); conditioned on R the linear
part is Gaussian with mean mu + P nu_R and covariance
Sigma_c = Sigma - P (tr(S) I - S) P^T, where nu_R = (Q S - S Q^T)^vee and
Q = U^T R V.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import matrix_fisher as mfish
from .matrix_fisher import InvalidMomentError
from .so3 import DEF1, DEF2, ProperSVD, hat, proper_svd, sign_matrix


class InvalidParameterError(ValueError):
    """Raised when MFG parameters violate their invariants."""


_EQ_TOL = 1e-12


def sym(A):
    return 0.5 * (A + A.T)


def sqrtm_psd(A):
    """Symmetric positive square root via eigendecomposition."""
    w, Q = np.linalg.eigh(sym(A))
    return (Q * np.sqrt(np.maximum(w, 0.0))) @ Q.T


def inv_sqrtm_pd(A):
    w, Q = np.linalg.eigh(sym(A))
    if np.any(w <= 0):
        raise InvalidParameterError("matrix is not positive definite")
    return (Q / np.sqrt(w)) @ Q.T


def _check_convention_order(S, convention):
    s1, s2, s3 = S
    tol = _EQ_TOL * (1.0 + np.max(np.abs(S)))
    if convention == DEF1:
        ok = s1 >= s2 - tol and s2 >= abs(s3) - tol
    elif convention == DEF2:
        ok = (s1 >= s2 - tol and s2 >= s3 - tol and s3 >= -tol) or (
            s1 <= s2 + tol and s2 <= s3 + tol and s3 <= tol
        )
    else:
        raise InvalidParameterError(f"unknown convention {convention!r}")
    if not ok:
        raise InvalidParameterError(f"S={S} violates the {convention} ordering")


@dataclass(frozen=True)
class MFGParams:
    """Parameters (mu, Sigma, P, U, S, V) of an MFG."""

    mu: np.ndarray
    Sigma: np.ndarray
    P: np.ndarray
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    convention: str = DEF1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        n = mu.size
        Sigma = np.asarray(self.Sigma, dtype=float).reshape(n, n)
        P = np.asarray(self.P, dtype=float).reshape(n, 3)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", sym(Sigma))
        object.__setattr__(self, "P", P)
        for name in ("U", "V"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float).reshape(3))

    @classmethod
    def from_F(cls, F, mu, Sigma, P, convention=DEF1):
        svd = proper_svd(F, convention)
        return cls(mu, Sigma, P, svd.U, svd.S, svd.V, convention)

    @property
    def n(self):
        return self.mu.size

    @property
    def F(self):
        return self.U @ np.diag(self.S) @ self.V.T

    @property
    def M(self):
        """Mode of the attitude marginal (U V^T)."""
        return self.U @ self.V.T

    @property
    def svd(self):
        return ProperSVD(self.U, self.S, self.V, self.convention)

    @property
    def tangent_info(self):
        """tr(S) I - S."""
        return np.sum(self.S) * np.eye(3) - np.diag(self.S)

    @property
    def Sigma_c(self):
        return sym(self.Sigma - self.P @ self.tangent_info @ self.P.T)

    def validate(self):
        _check_convention_order(self.S, self.convention)
        for name in ("U", "V"):
            R = getattr(self, name)
            if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-8 or abs(np.linalg.det(R) - 1.0) > 1e-8:
                raise InvalidParameterError(f"{name} is not a rotation")
        if not np.all(np.isfinite(self.Sigma)) or not np.all(np.isfinite(self.P)):
            raise InvalidParameterError("non-finite Sigma or P")
        try:
            np.linalg.cholesky(self.Sigma_c)
        except np.linalg.LinAlgError:
            raise InvalidParameterError("Sigma_c is not positive definite") from None
        return self

    def normalizer(self):
        return mfish.normalizer(self.S)

    def marginal(self):
        return mfish.MatrixFisher(svd=ProperSVD(self.U, self.S, self.V, self.convention))


# --------------------------------------------------------------------------
# conditional structure


def nu_from_q(Q, S):
    """(Q S - S Q^T)^vee for Q of shape (..., 3, 3)."""
    Q = np.asarray(Q, dtype=float)
    s1, s2, s3 = S
    return np.stack(
        [
            s2 * Q[..., 2, 1] - s3 * Q[..., 1, 2],
            s3 * Q[..., 0, 2] - s1 * Q[..., 2, 0],
            s1 * Q[..., 1, 0] - s2 * Q[..., 0, 1],
        ],
        axis=-1,
    )


def nu_R(params, R):
    Q = params.U.T @ np.asarray(R, dtype=float) @ params.V
    return nu_from_q(Q, params.S)


@dataclass(frozen=True)
class ConditionalGaussian:
    mu_c: np.ndarray
    Sigma_c: np.ndarray


def conditional(params, R):
    Sigma_c = params.Sigma_c
    try:
        np.linalg.cholesky(Sigma_c)
    except np.linalg.LinAlgError:
        raise InvalidParameterError("Sigma_c is not positive definite") from None
    return ConditionalGaussian(params.mu + params.P @ nu_R(params, R), Sigma_c)


@dataclass(frozen=True)
class EmbeddedGaussian:
    """Gaussian on R^(9+n) whose restriction to SO(3) x R^n is the MFG.

    Vectors use vec(R^T), i.e. the rows of R stacked.
    """

    mu_R: np.ndarray
    SigmaR_inv: np.ndarray
    P_R: np.ndarray
    tangent_basis: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray

    def conditional_on(self, R):
        """Schur-complement conditioning of x on x_R = vec(R^T)."""
        xR = np.asarray(R, dtype=float).reshape(9)
        gain = self.P_R @ self.SigmaR_inv
        mean = self.mu + gain @ (xR - self.mu_R)
        cov = self.Sigma - gain @ self.P_R.T
        return ConditionalGaussian(mean, sym(cov))


def embedded_gaussian(params):
    M = params.M
    K = params.V @ np.diag(params.S) @ params.V.T
    t = np.array([(M @ hat(params.V[:, i])).reshape(9) for i in range(3)])
    # orthogonal complement of the tangent directions
    q, _ = np.linalg.qr(t.T, mode="complete")
    T = np.vstack([t, q[:, 3:].T])
    P_R = np.hstack([params.P, np.zeros((params.n, 6))]) @ T
    return EmbeddedGaussian(M.reshape(9), np.kron(np.eye(3), K), P_R, T, params.mu, params.Sigma)


def log_density(params, R, x):
    """log p(R, x) against Haar measure times Lebesgue measure; batched over leading axes."""
    R = np.asarray(R, dtype=float)
    x = np.asarray(x, dtype=float)
    Sigma_c = params.Sigma_c
    L = np.linalg.cholesky(Sigma_c)
    nu = nu_from_q(params.U.T @ R @ params.V, params.S)
    r = x - params.mu - nu @ params.P.T
    z = np.linalg.solve(L, r[..., None])[..., 0] if r.ndim > 1 else np.linalg.solve(L, r)
    quad = np.sum(z * z, axis=-1)
    log_det = 2.0 * np.sum(np.log(np.diag(L)))
    log_mf = np.einsum("ij,...ij->...", params.F, R) - params.normalizer().log_c
    return log_mf - 0.5 * (quad + log_det + params.n * np.log(2.0 * np.pi))


def density(params, R, x):
    return np.exp(log_density(params, R, x))


# --------------------------------------------------------------------------
# moments


def nu_second_moment(S):
    """E[nu_R nu_R^T] under M(diag(S)); diagonal.

    Integrating the left-invariant derivative of nu against the density by parts
    gives E[nu nu^T] = tr(DS) I - DS with D = E[Q], so only the normalizer is needed.
    """
    S = np.asarray(S, dtype=float)
    ds = mfish.normalizer(S).d * S
    return np.diag(np.sum(ds) - ds)


def nu_second_moment_from_moments(S):
    """Same quantity assembled from the second canonical moments."""
    m = mfish.q_moments(S, 2)
    out = np.zeros(3)
    for i, (j, k) in enumerate(((1, 2), (0, 2), (0, 1))):
        sj, sk = S[j], S[k]
        out[i] = (sj * sj + sk * sk) * m.m2(j, k, j, k) - 2.0 * sj * sk * m.m2(j, k, k, j)
    return np.diag(out)


@dataclass(frozen=True)
class MFGMoments:
    ER: np.ndarray
    Ex: np.ndarray
    Enu: np.ndarray
    Exx: np.ndarray
    Exnu: np.ndarray
    Enunu: np.ndarray


def moments(params):
    nb = params.normalizer()
    Enunu = nu_second_moment(params.S)
    P, mu = params.P, params.mu
    return MFGMoments(
        ER=params.U @ np.diag(nb.d) @ params.V.T,
        Ex=mu.copy(),
        Enu=np.zeros(3),
        Exx=params.Sigma_c + np.outer(mu, mu) + P @ Enunu @ P.T,
        Exnu=P @ Enunu,
        Enunu=Enunu,
    )


# --------------------------------------------------------------------------
# marginal-conditional MLE


def marginal_mle(ER, convention=DEF1, S0=None):
    """(U, S, V) from the sample mean attitude."""
    svd = proper_svd(ER, DEF1)
    if S0 is not None:
        # warm start must be def1-ordered
        S0 = np.sort(np.abs(S0))[::-1] * np.array([1.0, 1.0, np.sign(np.prod(S0)) or 1.0])
    S = mfish.solve_s_from_d(svd.S, S0=S0)
    if convention == DEF1:
        return svd.U, S, svd.V
    out = proper_svd(svd.U @ np.diag(S) @ svd.V.T, convention)
    return out.U, out.S, out.V


def conditional_mle(S, Ex, Exx, Exnu, Enunu, Enu=None):
    """(mu, Sigma, P) from moments of x and nu_R computed with the fitted (U, S, V)."""
    Ex = np.atleast_1d(np.asarray(Ex, dtype=float))
    Enu = np.zeros(3) if Enu is None else np.asarray(Enu, dtype=float)
    cov_xx = np.asarray(Exx) - np.outer(Ex, Ex)
    cov_xn = np.asarray(Exnu) - np.outer(Ex, Enu)
    cov_nn = sym(np.asarray(Enunu) - np.outer(Enu, Enu))
    if not np.all(np.isfinite(cov_nn)) or np.trace(cov_nn) <= 0:
        raise InvalidMomentError("cov(nu_R, nu_R) is degenerate")
    # truncated solve: exact when cov_nn is well conditioned, drops null directions otherwise
    P = np.linalg.lstsq(cov_nn, cov_xn.T, rcond=1e-13)[0].T
    mu = Ex - P @ Enu
    tinfo = np.sum(S) * np.eye(3) - np.diag(S)
    Sigma = cov_xx - P @ cov_xn.T + P @ tinfo @ P.T
    return mu, sym(Sigma), P


def mle(R, x, weights=None, convention=DEF1, S0=None):
    """Marginal-conditional MLE from weighted samples (R_i, x_i).

    ``S0`` optionally warm-starts the solve for the concentration.
    """
    R = np.asarray(R, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N = R.shape[0]
    w = np.full(N, 1.0 / N) if weights is None else np.asarray(weights, dtype=float)
    w = w / np.sum(w)
    ER = np.einsum("n,nij->ij", w, R)
    U, S, V = marginal_mle(ER, convention, S0)
    nu = nu_from_q(np.einsum("ji,njk,kl->nil", U, R, V), S)
    Ex = w @ x
    Exx = (x * w[:, None]).T @ x
    Exnu = (x * w[:, None]).T @ nu
    Enu = w @ nu
    Enunu = (nu * w[:, None]).T @ nu
    mu, Sigma, P = conditional_mle(S, Ex, Exx, Exnu, Enunu, Enu)
    return MFGParams(mu, Sigma, P, U, S, V, convention)


def mle_from_moments(ER, Ex, Exx, Exnu, Enunu, Enu=None, convention=DEF1):
    """MLE when the moments of x and nu_R are already expressed in the fitted frame.

    ``Exnu``, ``Enunu`` and ``Enu`` must be evaluated with (U, S, V) from
    :func:`marginal_mle` applied to ``ER``.
    """
    U, S, V = marginal_mle(ER, convention)
    mu, Sigma, P = conditional_mle(S, Ex, Exx, Exnu, Enunu, Enu)
    return MFGParams(mu, Sigma, P, U, S, V, convention)


# --------------------------------------------------------------------------
# approximations and transforms


def gaussian_approx(params):
    """Mean and covariance of (x, eta) with R = U exp(eta^) V^T for concentrated S."""
    tinfo = params.tangent_info
    if np.min(np.diag(tinfo)) <= 0.0:
        raise InvalidParameterError("tr(S) I - S is not invertible")
    n = params.n
    cov = np.zeros((n + 3, n + 3))
    cov[:n, :n] = params.Sigma
    cov[:n, n:] = params.P
    cov[n:, :n] = params.P.T
    cov[n:, n:] = np.diag(1.0 / np.diag(tinfo))
    return np.concatenate([params.mu, np.zeros(3)]), cov


def canonicalize(params, R, x):
    """(Q, y) with Q = U^T R V and y = Sigma_c^(-1/2)(x - mu - P nu_R)."""
    Q = params.U.T @ np.asarray(R, dtype=float) @ params.V
    nu = nu_from_q(Q, params.S)
    r = np.asarray(x, dtype=float) - params.mu - nu @ params.P.T
    return Q, r @ inv_sqrtm_pd(params.Sigma_c)


def decanonicalize(params, Q, y):
    Q = np.asarray(Q, dtype=float)
    R = params.U @ Q @ params.V.T
    nu = nu_from_q(Q, params.S)
    x = np.asarray(y, dtype=float) @ sqrtm_psd(params.Sigma_c) + params.mu + nu @ params.P.T
    return R, x


def sample(params, rng, size=None):
    """Draw R from the attitude marginal, then x | R."""
    n_draw = 1 if size is None else int(size)
    Q = mfish.sample_canonical(params.S, rng, n_draw)
    y = rng.standard_normal((n_draw, params.n))
    R, x = decanonicalize(params, Q, y)
    if size is None:
        return R[0], x[0]
    return R, x


def add_independent_gaussian(params, mu2, Sigma2):
    """Distribution of (R, x + x') for an independent x' ~ N(mu2, Sigma2)."""
    return replace(
        params,
        mu=params.mu + np.asarray(mu2, dtype=float),
        Sigma=params.Sigma + np.asarray(Sigma2, dtype=float),
        _cache={},
    )


def convert_convention(params):
    """Equivalent parameters under the other sign convention.

    The two conventions differ only when det(U'V') = -1; then S -> S D3 and
    V -> V D3 with D3 = diag(-1, -1, 1), and Sigma absorbs the change of
    tr(S) I - S so that Sigma_c is preserved.
    """
    target = DEF2 if params.convention == DEF1 else DEF1
    needs_flip = params.S[2] < 0 if params.convention == DEF1 else params.S[0] < 0
    if not needs_flip:
        return replace(params, convention=target, _cache={})
    D3 = sign_matrix(3)
    S_new = params.S * np.diag(D3)
    new_info = np.sum(S_new) * np.eye(3) - np.diag(S_new)
    P = params.P
    Sigma_new = params.Sigma - P @ params.tangent_info @ P.T + P @ new_info @ P.T
    return MFGParams(params.mu, Sigma_new, P, params.U, S_new, params.V @ D3, target)


# --------------------------------------------------------------------------
# equivalent parametrisations


def _eq(a, b, scale):
    return abs(a - b) <= _EQ_TOL * scale


def multiplicity_case(S, convention=DEF1):
    """Which family of equivalent parametrisations S admits (1 to 8).

    1: S = 0; 2: s1 != s2 = s3 = 0; 3: s1 = s2 = s3 != 0; 4: s1 != s2 = s3 != 0;
    5: s1 = s2 != |s3|; 6: all distinct; 7: s1 = s2 = -s3 != 0 (def1);
    8: s1 != s2 = -s3 != 0 (def1).
    """
    s1, s2, s3 = np.asarray(S, dtype=float)
    scale = 1.0 + max(abs(s1), abs(s2), abs(s3))
    zero = [_eq(s, 0.0, scale) for s in (s1, s2, s3)]
    if all(zero):
        return 1
    if zero[1] and zero[2]:
        return 2
    if convention == DEF1 and s3 < 0 and _eq(s2, -s3, scale):
        return 7 if _eq(s1, s2, scale) else 8
    if _eq(s1, s2, scale) and _eq(s2, s3, scale):
        return 3
    if _eq(s2, s3, scale):
        return 4
    if _eq(s1, s2, scale):
        return 5
    return 6


def _fixes_axis(T, i, tol=1e-9):
    e = np.zeros(3)
    e[i] = 1.0
    return np.linalg.norm(T @ e - e) < tol


def _check_rotation(T):
    T = np.asarray(T, dtype=float)
    if T.shape != (3, 3) or np.linalg.norm(T.T @ T - np.eye(3)) > 1e-9 or np.linalg.det(T) < 0:
        raise InvalidParameterError("transform must be a rotation matrix")
    return T


def rotate_frames(params, T, T2=None):
    """Re-express ``params`` with rotated singular frames, keeping the density.

    ``T`` must be a symmetry allowed by the multiplicity of S (see
    :func:`multiplicity_case`); ``T2`` is the independent right-frame rotation
    used only when S = (s1, 0, 0) or S = 0.
    """
    T = _check_rotation(T)
    case = multiplicity_case(params.S, params.convention)
    P, Sigma = params.P, params.Sigma
    if case == 1:
        T2 = T if T2 is None else _check_rotation(T2)
        return replace(params, U=params.U @ T, V=params.V @ T2, _cache={})
    if case == 2:
        T2 = T if T2 is None else _check_rotation(T2)
        if not (_fixes_axis(T, 0) and _fixes_axis(T2, 0)):
            raise InvalidParameterError("case s1 != s2 = s3 = 0 allows rotations about e1 only")
        P_new = P.copy()
        P_new[:, 1:] = P[:, 1:] @ T[1:, 1:]
        return replace(params, U=params.U @ T, V=params.V @ T2, P=P_new, _cache={})
    if T2 is not None:
        raise InvalidParameterError("an independent right-frame rotation is only legal when s2 = s3 = 0")
    allowed = {3: None, 4: 0, 5: 2, 6: "identity", 7: None, 8: 0}[case]
    if allowed == "identity":
        if np.linalg.norm(T - np.eye(3)) > 1e-9:
            raise InvalidParameterError("distinct singular values admit no frame rotation")
    elif allowed is not None and not _fixes_axis(T, allowed):
        raise InvalidParameterError(f"this S only allows rotations about e{allowed + 1}")
    if case in (7, 8):
        D12 = sign_matrix((1, 2))
        V_new = params.V @ D12 @ T @ D12
        tinfo = params.tangent_info
        Sigma = Sigma + P @ (T @ tinfo @ T.T - tinfo) @ P.T
    else:
        V_new = params.V @ T
    return replace(params, U=params.U @ T, V=V_new, P=P @ T, Sigma=Sigma, _cache={})


def flip_columns(params, i):
    """Simultaneous sign change of the two columns of U, V and P other than column i."""
    D = sign_matrix(i)
    return replace(params, U=params.U @ D, V=params.V @ D, P=params.P @ D, _cache={})


# --------------------------------------------------------------------------
# information ratio


def information_shape(s):
    """r(s): the concentration-dependent factor of the information ratio at S = s I."""
    nb = mfish.normalizer(np.full(3, float(s)))
    d1, d11, d12 = nb.d[0], nb.d2[0, 0], nb.d2[0, 1]
    return 2.0 * s * s * (d11 - d1 * d1) / (d1 + s * d11 - s * d12)


def information_ratio(s, rho):
    """Fisher information about s_i carried by R relative to x | R.

    For n = 1, S = s I and P = rho sigma / sqrt(2 s) (1, 1, 1).
    """
    if s <= 0:
        raise InvalidParameterError("s must be positive")
    r2 = rho * rho
    if not (0.0 < r2 < 1.0 / 3.0):
        raise InvalidParameterError("need 0 < rho^2 < 1/3 for Sigma_c to be positive definite")
    return (1.0 - 3.0 * r2) / r2 * information_shape(s)


# --------------------------------------------------------------------------
# flat numeric record


def to_record(params):
    """Flat float vector: n, mu, Sigma, P, U, S, V (row-major), convention flag (1 or 2)."""
    flag = 1.0 if params.convention == DEF1 else 2.0
    return np.concatenate(
        [
            [float(params.n)],
            params.mu,
            params.Sigma.ravel(),
            params.P.ravel(),
            params.U.ravel(),
            params.S,
            params.V.ravel(),
            [flag],
        ]
    )


def from_record(rec):
    rec = np.asarray(rec, dtype=float)
    n = int(round(rec[0]))
    expected = 1 + n + n * n + 3 * n + 9 + 3 + 9 + 1
    if rec.size != expected:
        raise InvalidParameterError(f"record length {rec.size} does not match n={n}")
    k = 1
    mu = rec[k : k + n]
    k += n
    Sigma = rec[k : k + n * n].reshape(n, n)
    k += n * n
    P = rec[k : k + 3 * n].reshape(n, 3)
    k += 3 * n
    U = rec[k : k + 9].reshape(3, 3)
    k += 9
    S = rec[k : k + 3]
    k += 3
    V = rec[k : k + 9].reshape(3, 3)
    k += 9
    convention = DEF1 if rec[k] == 1.0 else DEF2
    return MFGParams(mu, Sigma, P, U, S, V, convention)
