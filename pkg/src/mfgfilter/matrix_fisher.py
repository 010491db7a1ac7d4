"""Matrix Fisher distribution on SO(3).

The normalizing constant

    c(S) = int_SO(3) etr(S Q^T) dQ

and all expectations under the distribution are evaluated by deterministic
quadrature over ZYZ Euler angles (alpha, beta, gamma) with the Haar weight
sin(beta) / (8 pi^2).  Writing phi = alpha + gamma and psi = alpha - gamma,

    tr(S Q^T) = s3 cos(b) + (s1 + s2)(1 + cos b)/2 cos(phi)
                + (s1 - s2)(cos b - 1)/2 cos(psi),

so for each beta node the phi and psi sums factor.  The beta direction uses
composite Gauss-Legendre panels graded towards the mode; the two periodic
directions use the trapezoid rule restricted to the window where the
integrand is not negligible.  Everything is scaled by exp(-(s1 + s2 + s3)) so
large concentrations never overflow.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import i0e, i1e, ive

from .so3 import DEF1, ProperSVD, euler_zyz, proper_svd, quat_to_rotation

S_CAP = 1e4
_LOG_CUTOFF = 45.0  # integrand values below exp(-45) of the peak are dropped


class InvalidMomentError(ValueError):
    """Raised when a first-moment vector is outside the attainable set."""


# --------------------------------------------------------------------------
# canonical ordering of S


def canonical_transform(S):
    """Signed permutation taking diag(S) to the def1 ordering.

    Returns ``(S_canon, perm, eps, A, B)`` with ``S_canon[i] = eps[i] * S[perm[i]]``
    and ``A diag(S) B^T = diag(S_canon)`` for rotations ``A``, ``B``.
    """
    S = np.asarray(S, dtype=float)
    perm = np.argsort(-np.abs(S), kind="stable")
    mags = np.abs(S[perm])
    signs = np.where(S[perm] < 0, -1.0, 1.0)
    neg = int(np.sum(signs < 0))
    zero = np.flatnonzero(mags == 0.0)
    if neg % 2 == 1 and zero.size == 0:
        S_canon = np.array([mags[0], mags[1], -mags[2]])
    else:
        S_canon = mags.copy()
    eps = np.where(S_canon < 0, -1.0, 1.0) * signs
    if np.prod(eps) < 0:
        # only possible with a zero entry, whose sign is free
        eps[zero[-1]] *= -1.0
    Pi = np.zeros((3, 3))
    Pi[np.arange(3), perm] = 1.0
    d = np.array([1.0, 1.0, np.linalg.det(Pi)])
    B = np.diag(d) @ Pi
    A = np.diag(eps * d) @ Pi
    return S_canon, perm, eps, A, B


# --------------------------------------------------------------------------
# quadrature building blocks


@lru_cache(maxsize=64)
def _gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _beta_panels(S):
    s1, s2, s3 = S
    rate = s2 + s3
    if rate > 0.5 * _LOG_CUTOFF:
        beta_max = float(np.arccos(1.0 - _LOG_CUTOFF / rate))
    else:
        beta_max = np.pi
    beta_min = 0.25 / np.sqrt(abs(s1) + abs(s2) + abs(s3) + 1.0)
    edges = [beta_max]
    while edges[-1] / 2.0 > beta_min:
        edges.append(edges[-1] / 2.0)
    edges.append(0.0)
    return np.array(edges[::-1])


def _beta_rule(S, per_panel):
    edges = _beta_panels(S)
    x, w = _gauss_legendre(per_panel)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (hi - lo) * x + 0.5 * (hi + lo)).ravel()
    weights = (0.5 * (hi - lo) * w).ravel()
    return nodes, weights


def _window(kappa, n_min):
    """Trapezoid size and index window for exp(kappa (cos t - 1)) on one period.

    ``kappa`` is an array (one entry per beta node).  Returns the node counts,
    the padded index grid and a validity mask.
    """
    kappa = np.maximum(np.asarray(kappa, dtype=float), 0.0)
    n = np.maximum(n_min, np.ceil(10.0 * np.sqrt(kappa) + 10.0)).astype(int)
    ratio = np.where(kappa > 0, _LOG_CUTOFF / np.maximum(kappa, 1e-300), np.inf)
    half = np.where(ratio < 2.0, np.arccos(np.clip(1.0 - ratio, -1.0, 1.0)), np.pi)
    J = np.ceil(half * n / (2.0 * np.pi)).astype(int) + 1
    full = 2 * J + 1 >= n
    lo = np.where(full, -(n // 2), -J)
    hi = np.where(full, n - n // 2 - 1, J)
    jmax = int(max(np.max(-lo), np.max(hi)))
    j = np.arange(-jmax, jmax + 1)[None, :]
    mask = (j >= lo[:, None]) & (j <= hi[:, None])
    return n, j, mask


def _angular_sums(kappa, n_min, orders):
    """(1/n) sum_j cos^m(t_j) exp(kappa (cos t_j - 1)) for m in ``orders``."""
    n, j, mask = _window(kappa, n_min)
    t = 2.0 * np.pi * j / n[:, None]
    ct = np.cos(t)
    e = np.where(mask, np.exp(kappa[:, None] * (ct - 1.0)), 0.0) / n[:, None]
    return [np.sum(e * ct**m, axis=1) for m in orders]


@dataclass(frozen=True)
class NormalizerBundle:
    """Normalizing constant with first and second derivatives in S.

    ``log_c`` is always finite.  ``d`` and ``d2`` are the derivatives divided
    by c, so they stay finite for any concentration.
    """

    S: np.ndarray
    log_c: float
    d: np.ndarray  # (dc/ds_i) / c
    d2: np.ndarray  # (d^2 c / ds_i ds_j) / c
    per_panel: int = 12

    @property
    def c(self):
        return float(np.exp(self.log_c))

    @property
    def dc(self):
        return self.d * self.c

    @property
    def d2c(self):
        return self.d2 * self.c

    @property
    def jacobian(self):
        """d(d_i)/d(s_j)."""
        return self.d2 - np.outer(self.d, self.d)


def _bessel_sums(kappa, orders):
    """Exact period averages of cos^m(t) exp(kappa (cos t - 1)) via scaled Bessel I_k."""
    I0 = i0e(kappa)
    I1 = i1e(kappa)
    # I2 by downward recurrence; the series takes over where 2 I1 / x cancels badly
    small = kappa < 1e-2
    k2 = kappa * kappa
    safe = np.where(small, 1.0, kappa)
    I2 = np.where(small, np.exp(-kappa) * (k2 / 8.0) * (1.0 + k2 / 12.0), I0 - 2.0 * I1 / safe)
    table = {0: I0, 1: I1, 2: 0.5 * (I0 + I2)}
    return [table[m] for m in orders]


def _normalizer_canonical(S, per_panel, angular="bessel"):
    beta, wb = _beta_rule(S, per_panel)
    return _normalizer_from_nodes(S, beta, [wb], angular)[0]


def _normalizer_pair(S, per_panel):
    """Estimates at ``per_panel`` and ``2 * per_panel`` nodes sharing one vectorised pass."""
    b1, w1 = _beta_rule(S, per_panel)
    b2, w2 = _beta_rule(S, 2 * per_panel)
    beta = np.concatenate([b1, b2])
    z1, z2 = np.zeros_like(w2), np.zeros_like(w1)
    return _normalizer_from_nodes(S, beta, [np.concatenate([w1, z1]), np.concatenate([z2, w2])])


def _normalizer_from_nodes(S, beta, weight_sets, angular="bessel"):
    s1, s2, s3 = S
    cb = np.cos(beta)
    a = 0.5 * (s1 + s2) * (1.0 + cb)
    b = 0.5 * (s1 - s2) * (1.0 - cb)  # magnitude of the psi coefficient
    if angular == "bessel":
        sums = _bessel_sums(np.concatenate([a, b]), (0, 1, 2))
        A0, A1, A2 = (v[: a.size] for v in sums)
        B0, B1, B2 = (v[a.size :] for v in sums)
    else:
        A0, A1, A2 = _angular_sums(a, 16, (0, 1, 2))
        B0, B1, B2 = _angular_sums(b, 8, (0, 1, 2))
    # psi weight exp(-b (cos psi + 1)) peaks at psi = pi; substitute psi = pi + t
    B1 = -B1
    p, m = 0.5 * (1.0 + cb), 0.5 * (cb - 1.0)
    # E-integrands of 1, Q11, Q22, Q33 and their products
    I0 = A0 * B0
    q1 = p * A1 * B0 + m * A0 * B1
    q2 = p * A1 * B0 - m * A0 * B1
    q11 = p * p * A2 * B0 + 2 * p * m * A1 * B1 + m * m * A0 * B2
    q22 = p * p * A2 * B0 - 2 * p * m * A1 * B1 + m * m * A0 * B2
    q12 = p * p * A2 * B0 - m * m * A0 * B2
    rows = np.stack([I0, q1, q2, cb * I0, q11, q12, cb * q1, q22, cb * q2, cb * cb * I0])
    kernel = 0.5 * np.sin(beta) * np.exp((s2 + s3) * (cb - 1.0))
    out = []
    for w in weight_sets:
        v = rows @ (w * kernel)
        Z = float(v[0])
        v = v / Z
        d2 = np.array([[v[4], v[5], v[6]], [v[5], v[7], v[8]], [v[6], v[8], v[9]]])
        out.append((float(np.log(Z) + s1 + s2 + s3), v[1:4].copy(), d2))
    return out


class _LRU:
    def __init__(self, capacity=4096):
        self.capacity = capacity
        self._data = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        return None

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def clear(self):
        with self._lock:
            self._data.clear()


_normalizer_cache = _LRU(4096)
_rule_cache = _LRU(256)


def set_cache_capacity(capacity):
    _normalizer_cache.capacity = int(capacity)
    _rule_cache.capacity = max(1, int(capacity) // 16)


def clear_caches():
    _normalizer_cache.clear()
    _rule_cache.clear()


def _key(S):
    return tuple(np.round(np.asarray(S, dtype=float), 12).tolist())


def normalizer(S, rtol=1e-8, per_panel=8, max_doublings=5):
    """c(S) and its first two derivatives.

    The node count per beta panel is doubled until successive estimates of c
    and of the derivative ratios agree to ``rtol``; the finer estimate is
    returned.
    """
    S = np.asarray(S, dtype=float)
    if S.shape != (3,) or not np.all(np.isfinite(S)):
        raise ValueError("S must be a finite 3-vector")
    key = _key(S) + (rtol,)
    hit = _normalizer_cache.get(key)
    if hit is not None:
        return hit
    Sc, perm, eps, _, _ = canonical_transform(S)
    n = per_panel
    for _ in range(max(max_doublings, 1)):
        coarse, prev = _normalizer_pair(Sc, n)
        n *= 2
        scale = 1.0 + np.abs(prev[2]).max()
        if (
            abs(prev[0] - coarse[0]) < rtol
            and np.max(np.abs(prev[1] - coarse[1])) < rtol
            and np.max(np.abs(prev[2] - coarse[2])) < rtol * scale
        ):
            break
    log_c, d_c, d2_c = prev
    # back to the caller's ordering: s'_i = eps_i s_perm(i)
    d = np.empty(3)
    d[perm] = eps * d_c
    d2 = np.empty((3, 3))
    d2[np.ix_(perm, perm)] = np.outer(eps, eps) * d2_c
    out = NormalizerBundle(S.copy(), log_c, d, d2, n)
    _normalizer_cache.put(key, out)
    return out


def log_normalizer(S):
    return normalizer(S).log_c


# --------------------------------------------------------------------------
# full quadrature rule for expectations of arbitrary functions of Q


@dataclass(frozen=True)
class QuadratureRule:
    """Weighted rotations with sum(w f(Q)) = E[f(Q)] for Q ~ M(diag(S))."""

    S: np.ndarray
    Q: np.ndarray  # (N, 3, 3)
    w: np.ndarray  # (N,), sums to 1

    def expect(self, values):
        """Weighted mean over the leading axis of ``values``."""
        return np.tensordot(self.w, values, axes=(0, 0))

    @property
    def q(self):
        return self.Q.reshape(-1, 9)


def _rule_canonical(S, per_panel, tol):
    s1, s2, s3 = S
    beta, wb = _beta_rule(S, per_panel)
    cb = np.cos(beta)
    a = 0.5 * (s1 + s2) * (1.0 + cb)
    b = 0.5 * (s1 - s2) * (1.0 - cb)
    gb = 0.5 * wb * np.sin(beta) * np.exp((s2 + s3) * (cb - 1.0))
    betas, phis, psis, ws = [], [], [], []
    nphi, jphi, mphi = _window(a, 16)
    npsi, jpsi, mpsi = _window(b, 8)
    for i in range(beta.size):
        if gb[i] <= 0.0:
            continue
        jp = jphi[0, mphi[i]]
        phi = 2.0 * np.pi * jp / nphi[i]
        ephi = np.exp(a[i] * (np.cos(phi) - 1.0)) / nphi[i]
        jq = jpsi[0, mpsi[i]]
        t = 2.0 * np.pi * jq / npsi[i]
        # psi over [0, 4 pi): two copies of the window, around pi and 3 pi
        psi = np.concatenate([np.pi + t, 3.0 * np.pi + t])
        epsi = np.concatenate([np.exp(b[i] * (np.cos(t) - 1.0))] * 2) / (2 * npsi[i])
        kp = ephi > tol * ephi.max()
        kq = epsi > tol * epsi.max()
        P, Y = np.meshgrid(phi[kp], psi[kq], indexing="ij")
        W = gb[i] * np.outer(ephi[kp], epsi[kq])
        betas.append(np.full(P.size, beta[i]))
        phis.append(P.ravel())
        psis.append(Y.ravel())
        ws.append(W.ravel())
    beta_all = np.concatenate(betas)
    phi_all = np.concatenate(phis)
    psi_all = np.concatenate(psis)
    w_all = np.concatenate(ws)
    keep = w_all > tol * w_all.max()
    w_all = w_all[keep]
    Q = euler_zyz(
        0.5 * (phi_all[keep] + psi_all[keep]), beta_all[keep], 0.5 * (phi_all[keep] - psi_all[keep])
    )
    return Q, w_all / w_all.sum()


def quadrature_rule(S, per_panel=None, tol=1e-14):
    """Tensor-product rule over SO(3) adapted to M(diag(S)).

    General but large (tens of thousands of nodes); the filter uses
    :func:`q_moments` instead.
    """
    S = np.asarray(S, dtype=float)
    if per_panel is None:
        per_panel = normalizer(S).per_panel
    key = _key(S) + (per_panel, tol)
    hit = _rule_cache.get(key)
    if hit is not None:
        return hit
    Sc, _, _, A, B = canonical_transform(S)
    Qc, w = _rule_canonical(Sc, per_panel, tol)
    # Q = A^T Q' B maps M(diag(S')) samples to M(diag(S))
    Q = np.einsum("ji,njk,kl->nil", A, Qc, B)
    out = QuadratureRule(S.copy(), Q, w)
    _rule_cache.put(key, out)
    return out


@dataclass(frozen=True)
class QMomentTable:
    """Moments of Q ~ M(diag(S)) with entries flattened row-major (index 3i + j)."""

    first: np.ndarray  # (3, 3)
    second: np.ndarray | None = None  # (9, 9): E[q_a q_b]
    third: np.ndarray | None = None  # (9, 9, 9)

    def m2(self, i, j, k, l):
        return self.second[3 * i + j, 3 * k + l]

    def m3(self, i, j, k, l, m, n):
        return self.third[3 * i + j, 3 * k + l, 3 * m + n]


# Each entry of Q = Rz(alpha) Ry(beta) Rz(gamma) is a polynomial in
# (cos b, sin b, X, Y, Z, W) with X, Y = cos, sin(phi/2) and Z, W = cos, sin(psi/2).
# Products of entries are expanded once; a moment is then a linear
# combination of separable integrals over (beta, phi, psi).


def _pmul(a, b):
    out = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return {e: c for e, c in out.items() if c != 0.0}


def _padd(*terms):
    out = {}
    for coef, poly in terms:
        for e, c in poly.items():
            out[e] = out.get(e, 0.0) + coef * c
    return {e: c for e, c in out.items() if c != 0.0}


def _var(k):
    e = [0] * 6
    e[k] = 1
    return {tuple(e): 1.0}


def _q_entry_polys():
    cb, sb, X, Y, Z, W = (_var(k) for k in range(6))
    ca = _padd((1, _pmul(X, Z)), (-1, _pmul(Y, W)))
    sa = _padd((1, _pmul(Y, Z)), (1, _pmul(X, W)))
    cg = _padd((1, _pmul(X, Z)), (1, _pmul(Y, W)))
    sg = _padd((1, _pmul(Y, Z)), (-1, _pmul(X, W)))
    m = _pmul
    return [
        _padd((1, m(m(ca, cb), cg)), (-1, m(sa, sg))),
        _padd((-1, m(m(ca, cb), sg)), (-1, m(sa, cg))),
        m(ca, sb),
        _padd((1, m(m(sa, cb), cg)), (1, m(ca, sg))),
        _padd((-1, m(m(sa, cb), sg)), (1, m(ca, cg))),
        m(sa, sb),
        _padd((-1, m(sb, cg))),
        m(sb, sg),
        cb,
    ]


_HALF_PAIRS = [(i, t - i) for t in (0, 2, 4, 6) for i in range(t + 1)]


def _half_angle_harmonics():
    # cos^i(x/2) sin^j(x/2), i + j even, as sum_k c_k cos(k x) + (sine terms);
    # sine terms integrate to zero against the even weights and are dropped
    x = 2.0 * np.pi * np.arange(16) / 16
    out = {}
    for i, j in _HALF_PAIRS:
        f = np.cos(x / 2) ** i * np.sin(x / 2) ** j
        c = [np.mean(f)] + [2.0 * np.mean(f * np.cos(k * x)) for k in range(1, 4)]
        out[(i, j)] = np.array(c)
    return out


def _build_moment_maps():
    polys = _q_entry_polys()
    harm = _half_angle_harmonics()

    def row(poly):
        r = np.zeros((16, 4, 4))
        for (p, q, i, j, k, l), c in poly.items():
            if (i + j) % 2 or (k + l) % 2:
                continue  # odd in psi over [0, 4 pi): integrates to zero
            r[4 * p + q] += c * np.outer(harm[(i, j)], harm[(k, l)])
        return r.ravel()

    pairs = [(a, b) for a in range(9) for b in range(a, 9)]
    m2 = np.array([row(_pmul(polys[a], polys[b])) for a, b in pairs])
    triples = [(a, b, c) for a in range(9) for b in range(a, 9) for c in range(b, 9)]
    prod2 = {(a, b): _pmul(polys[a], polys[b]) for a, b in pairs}
    m3 = np.array([row(_pmul(prod2[(a, b)], polys[c])) for a, b, c in triples])
    return pairs, m2, triples, m3


_MOMENT_MAPS = None
_maps_lock = threading.Lock()


def _moment_maps():
    global _MOMENT_MAPS
    with _maps_lock:
        if _MOMENT_MAPS is None:
            _MOMENT_MAPS = _build_moment_maps()
    return _MOMENT_MAPS


def _features_canonical(S, per_panel):
    """Separable integrals sum_beta g cb^p sb^q <cos(k phi)> <cos(m psi)>, normalised."""
    s1, s2, s3 = S
    beta, wb = _beta_rule(S, per_panel)
    cb, sb = np.cos(beta), np.sin(beta)
    a = 0.5 * (s1 + s2) * (1.0 + cb)
    b = 0.5 * (s1 - s2) * (1.0 - cb)
    g = 0.5 * wb * sb * np.exp((s2 + s3) * (cb - 1.0))
    G = np.stack([g * cb**p * sb**q for p in range(4) for q in range(4)], axis=1)
    k = np.arange(4)
    A = ive(k[None, :], a[:, None])
    # psi = pi + t flips the sign of the odd harmonics
    B = ive(k[None, :], b[:, None]) * (-1.0) ** k
    T = G.T @ (A[:, :, None] * B[:, None, :]).reshape(-1, 16)
    T = T.ravel()
    return T / T[0]


def _moment_cache_key(S, order):
    return ("moments",) + _key(S) + (order,)


def q_moments(S, order=2):
    """Moments of Q up to ``order`` (1, 2 or 3).

    Computed from the symbolic expansion of the Euler-angle parametrisation
    and the same beta panels the normalizer converged on.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    S = np.asarray(S, dtype=float)
    key = _moment_cache_key(S, order)
    hit = _rule_cache.get(key)
    if hit is not None:
        return hit
    nb = normalizer(S)
    first = np.diag(nb.d)
    if order == 1:
        out = QMomentTable(first)
        _rule_cache.put(key, out)
        return out
    Sc, _, _, A, B = canonical_transform(S)
    T = _features_canonical(Sc, nb.per_panel)
    pairs, m2map, triples, m3map = _moment_maps()
    second = np.empty((9, 9))
    vals = m2map @ T
    for (a, b), v in zip(pairs, vals):
        second[a, b] = second[b, a] = v
    third = None
    if order == 3:
        third = np.empty((9, 9, 9))
        vals = m3map @ T
        for (a, b, c), v in zip(triples, vals):
            for idx in ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)):
                third[idx] = v
    # Q = A^T Q' B; row-major vec gives q = K q' with K = kron(A^T, B^T)
    if not (np.array_equal(A, np.eye(3)) and np.array_equal(B, np.eye(3))):
        K = np.kron(A.T, B.T)
        second = K @ second @ K.T
        if third is not None:
            third = (K @ third.reshape(9, 81)).reshape(9, 9, 9) @ K.T
            third = K @ third
    out = QMomentTable(first, second, third)
    _rule_cache.put(key, out)
    return out


# --------------------------------------------------------------------------
# S <-> D


def s_to_d(S):
    return normalizer(S).d


def _check_d(D):
    D = np.asarray(D, dtype=float)
    if D.shape != (3,) or not np.all(np.isfinite(D)):
        raise InvalidMomentError("D must be a finite 3-vector")
    if np.any(np.abs(D) >= 1.0):
        raise InvalidMomentError(f"|d_i| must be < 1, got {D}")
    if not (D[0] >= D[1] - 1e-12 and D[1] >= abs(D[2]) - 1e-12):
        raise InvalidMomentError(f"D must satisfy d1 >= d2 >= |d3|, got {D}")
    # diagonal of E[Q] lies in the tetrahedron spanned by diagonals of sign rotations
    if D[0] + D[1] - D[2] >= 1.0 - 1e-12:
        raise InvalidMomentError(f"D outside the attainable set (d1 + d2 - d3 >= 1): {D}")
    return D


def _initial_s(D):
    # concentrated-Gaussian guess: 1 - d_i ~ (a_j + a_k)/2 with a_i = 1/(s_j + s_k)
    e = 1.0 - D
    a = np.array([e[1] + e[2] - e[0], e[0] + e[2] - e[1], e[0] + e[1] - e[2]])
    if np.all(a > 1e-12) and np.all(D > 0.5):
        inv = 1.0 / a
        S = 0.5 * inv.sum() - inv
        return np.clip(S, -S_CAP, S_CAP)
    return 3.0 * D


def solve_s_from_d(D, S0=None, tol=1e-14, max_iter=100):
    """Invert D = d(S) for a def1-ordered moment vector.

    Minimises the convex function log c(S) - S.D by damped Newton steps,
    falling back to cyclic coordinate bisection if Newton stalls.
    Entries of S are capped at +-1e4.
    """
    D = _check_d(D)
    if np.all(D == 0.0):
        return np.zeros(3)
    S = _initial_s(D) if S0 is None else np.clip(np.asarray(S0, dtype=float), -S_CAP, S_CAP)

    def objective(s):
        nb = normalizer(s)
        return nb.log_c - s @ D, nb

    f, nb = objective(S)
    for _ in range(max_iter):
        g = nb.d - D
        if np.max(np.abs(g)) < tol:
            return S
        H = nb.jacobian
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -g
        if not np.all(np.isfinite(step)):
            step = -g
        t = 1.0
        accepted = False
        for _ in range(60):
            S_new = np.clip(S + t * step, -S_CAP, S_CAP)
            f_new, nb_new = objective(S_new)
            if f_new <= f + 1e-4 * t * (g @ (S_new - S)) or np.max(np.abs(nb_new.d - D)) < tol:
                accepted = True
                break
            t *= 0.5
        if not accepted or np.allclose(S_new, S, rtol=0.0, atol=1e-15):
            if np.max(np.abs(nb.d - D)) < 1e3 * tol or np.any(np.abs(S_new) >= S_CAP):
                return S_new if accepted else S
            return _bisection_fallback(D, S, tol)
        S, f, nb = S_new, f_new, nb_new
    if np.max(np.abs(nb.d - D)) < 1e3 * tol or np.any(np.abs(S) >= S_CAP):
        return S
    return _bisection_fallback(D, S, tol)


def _bisection_fallback(D, S, tol, sweeps=200):
    # each d_i is increasing in s_i, so cyclic 1-D bisection converges
    S = S.copy()
    for _ in range(sweeps):
        for i in range(3):
            lo, hi = -S_CAP, S_CAP
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                S[i] = mid
                if normalizer(S).d[i] < D[i]:
                    lo = mid
                else:
                    hi = mid
            S[i] = 0.5 * (lo + hi)
        if np.max(np.abs(normalizer(S).d - D)) < tol:
            break
    return S


# --------------------------------------------------------------------------
# the distribution


class MatrixFisher:
    """M(F) with density etr(F^T R) / c(S) against the Haar measure."""

    def __init__(self, F=None, *, svd: ProperSVD | None = None):
        if svd is None:
            svd = proper_svd(np.zeros((3, 3)) if F is None else F, DEF1)
        self.svd = svd

    @classmethod
    def from_usv(cls, U, S, V):
        return cls(svd=ProperSVD(np.asarray(U, float), np.asarray(S, float), np.asarray(V, float)))

    @property
    def U(self):
        return self.svd.U

    @property
    def S(self):
        return self.svd.S

    @property
    def V(self):
        return self.svd.V

    @property
    def F(self):
        return self.svd.matrix()

    @property
    def mode(self):
        return self.U @ self.V.T

    def normalizer(self):
        return normalizer(self.S)

    def mean(self):
        return mean_matrix(self)

    def log_density(self, R):
        R = np.asarray(R, dtype=float)
        return np.einsum("ij,...ij->...", self.F, R) - self.normalizer().log_c

    def density(self, R):
        return np.exp(self.log_density(R))

    def sample(self, rng, size=None):
        return sample(self, rng, size)


def mean_matrix(mf):
    return mf.U @ np.diag(normalizer(mf.S).d) @ mf.V.T


# --------------------------------------------------------------------------
# sampling


def _bingham_acg(lam, rng, n):
    """Draw n unit 4-vectors with density proportional to exp(x^T diag(lam) x).

    Rejection from an angular central Gaussian envelope.
    """
    A = np.max(lam) - lam  # exp(-x^T A x), A >= 0
    q = 4
    # b solves sum 1/(b + 2 A_i) = 1
    if np.all(A == 0):
        b = float(q)
    else:
        lo, hi = 1e-12, float(q)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.sum(1.0 / (mid + 2.0 * A)) > 1.0:
                lo = mid
            else:
                hi = mid
        b = 0.5 * (lo + hi)
    omega = 1.0 + 2.0 * A / b
    log_m = -(q - b) / 2.0 + (q / 2.0) * np.log(q / b)
    out = np.empty((0, 4))
    while out.shape[0] < n:
        need = n - out.shape[0]
        m = int(need * 1.5) + 16
        y = rng.standard_normal((m, 4)) / np.sqrt(omega)
        x = y / np.linalg.norm(y, axis=1, keepdims=True)
        xa = np.sum(A * x * x, axis=1)
        xo = np.sum(omega * x * x, axis=1)
        log_ratio = -xa + (q / 2.0) * np.log(xo) - log_m
        u = rng.random(m)
        out = np.vstack([out, x[np.log(u) < log_ratio]])
    return out[:n]


def sample_canonical(S, rng, size):
    """Q ~ M(diag(S)), shape (size, 3, 3)."""
    s1, s2, s3 = np.asarray(S, dtype=float)
    # tr(diag(S) R(q)^T) = q^T diag(lam) q for unit quaternions q = (w, x, y, z)
    lam = np.array([s1 + s2 + s3, s1 - s2 - s3, -s1 + s2 - s3, -s1 - s2 + s3])
    return quat_to_rotation(_bingham_acg(lam, rng, size))


def sample(mf, rng, size=None):
    n = 1 if size is None else int(size)
    Q = sample_canonical(mf.S, rng, n)
    R = mf.U @ Q @ mf.V.T
    return R[0] if size is None else R
