"""Oracles and builders shared by several test modules."""

import numpy as np
from scipy.stats import norm

from mfgfilter import mfg
from mfgfilter.mfg import InvalidParameterError, MFGParams
from mfgfilter.propagation import sigma_points
from mfgfilter.so3 import DEF1, exp_so3, sign_matrix, uniform_rotation

PROBE_SIGNS = [np.eye(3)] + [sign_matrix(i) for i in (1, 2, 3)]


def family_z(count, level=norm.sf(3.0) * 2):
    """Bonferroni-adjusted two-sided z threshold matching a 3-sigma family-wise level."""
    return norm.isf(level / (2 * count))


def random_spd(rng, n, floor=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + floor * np.eye(n)


def random_params(rng, S, n=3, p_scale=0.3, convention=DEF1, frames=True):
    """Valid MFG parameters with the given S; Sigma is built from a random SPD Sigma_c."""
    S = np.asarray(S, dtype=float)
    U = uniform_rotation(rng) if frames else np.eye(3)
    V = uniform_rotation(rng) if frames else np.eye(3)
    tinfo = np.sum(S) * np.eye(3) - np.diag(S)
    P = p_scale * rng.standard_normal((n, 3)) / np.sqrt(max(np.abs(tinfo).max(), 1.0))
    Sigma_c = random_spd(rng, n)
    Sigma = Sigma_c + P @ tinfo @ P.T
    return MFGParams(rng.standard_normal(n), Sigma, P, U, S, V, convention).validate()


def probe_points(params, rng, count):
    """Haar attitudes and linear parts spread around the conditional mean."""
    R = uniform_rotation(rng, count)
    L = np.linalg.cholesky(params.Sigma_c)
    x = params.mu + 2.0 * rng.standard_normal((count, params.n)) @ L.T
    return R, x


def align_flips(U_ref, U):
    """The sign matrix D (I or D_i) that best maps U onto U_ref."""
    return min(PROBE_SIGNS, key=lambda D: np.linalg.norm(U @ D - U_ref))


def measurement_log_likelihood(R, attitude_meas=(), vector_meas=()):
    """Log-likelihood of the readings at each attitude R, evaluated from the sensor models directly."""
    out = np.zeros(R.shape[0])
    for m in attitude_meas:
        # error rotation R^T Z follows M(F_Z)
        out += np.einsum("ij,nki,kj->n", m.F_Z, R, m.Z)
    for m in vector_meas:
        # z follows vMF about R^T B a
        out += m.kappa * np.einsum("nki,k->ni", R, m.B @ m.a) @ m.z
    return out


def comparable_fields(ref, fit):
    """F, mu, P and Sigma of ``fit`` with its column signs aligned to ``ref``."""
    from mfgfilter.mfg import flip_columns

    D = align_flips(ref.U, fit.U)
    if np.trace(D) < 3:
        fit = flip_columns(fit, int(np.argmax(np.diag(D))) + 1)
    return np.concatenate([fit.F.ravel(), fit.mu, fit.P.ravel(), fit.Sigma[np.triu_indices(fit.n)]])


def importance_posterior_gap(prior, posterior, attitude_meas, vector_meas, rng, N=1_000_000, B=20):
    """Standardised gaps between ``posterior`` and a weighted-sample refit of the exact posterior.

    Prior draws are weighted by the measurement likelihood and refit by MLE; the
    standard error of each field comes from B disjoint subsample refits.
    Returns (gap / se, Student-t degrees of freedom).
    """
    from mfgfilter.mfg import mle, sample

    R, x = sample(prior, rng, N)
    logw = measurement_log_likelihood(R, attitude_meas, vector_meas)
    w = np.exp(logw - logw.max())
    full = comparable_fields(posterior, mle(R, x, w))
    parts = np.array(
        [comparable_fields(posterior, mle(R[k::B], x[k::B], w[k::B])) for k in range(B)]
    )
    se = parts.std(axis=0, ddof=1) / np.sqrt(B)
    return (full - comparable_fields(posterior, posterior)) / se, B - 1


def max_log_gap(a, b, R, x):
    la, lb = mfg.log_density(a, R, x), mfg.log_density(b, R, x)
    return np.max(np.abs(la - lb) / (1.0 + np.abs(la)))


def draw_feasible_s(r):
    """def1-ordered S whose sigma points exist with the default weights, and the number of rejected draws."""
    rejected = 0
    while True:
        S = np.sort(r.uniform(0.0, 40.0, 3))[::-1] * np.array([1, 1, r.choice([-1, 1])])
        try:
            sigma_points(MFGParams(np.zeros(1), np.eye(1), np.zeros((1, 3)), np.eye(3), S, np.eye(3)))
            return S, rejected
        except InvalidParameterError:
            rejected += 1


def feasible_s(r):
    return draw_feasible_s(r)[0]


def rand_axis_rotation(rng, axis):
    v = np.zeros(3)
    v[axis] = rng.uniform(-np.pi, np.pi)
    return exp_so3(v)


EQUIVALENCE_CASES = [
    (1, [0.0, 0.0, 0.0], "any", "any"),
    (2, [4.0, 0.0, 0.0], 0, 0),
    (3, [3.0, 3.0, 3.0], "any", None),
    (4, [5.0, 2.0, 2.0], 0, None),
    (5, [5.0, 5.0, 2.0], 2, None),
    (6, [5.0, 3.0, 1.0], "identity", None),
    (7, [3.0, 3.0, -3.0], "any", None),
    (8, [5.0, 2.0, -2.0], 0, None),
]
