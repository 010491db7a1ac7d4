import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgfilter import matrix_fisher as mf
from mfgfilter.matrix_fisher import (
    InvalidMomentError,
    MatrixFisher,
    mean_matrix,
    normalizer,
    q_moments,
    quadrature_rule,
    solve_s_from_d,
)
from mfgfilter.mfg import nu_second_moment, nu_second_moment_from_moments
from mfgfilter.so3 import euler_zyz, exp_so3, hat, log_so3_batch, uniform_rotation
from helpers import family_z
from strategies import seeds

svec = st.lists(st.floats(-30.0, 30.0), min_size=3, max_size=3).map(np.array)


def haar_estimate(S, n, seed):
    """Monte-Carlo c, dc, d2c with standard errors from Haar draws."""
    Q = uniform_rotation(np.random.default_rng(seed), n)
    diag = np.stack([Q[:, 0, 0], Q[:, 1, 1], Q[:, 2, 2]], axis=1)
    f = np.exp(diag @ S)
    est = {"c": f, "dc": f[:, None] * diag, "d2c": f[:, None, None] * diag[:, :, None] * diag[:, None, :]}
    return {k: (v.mean(axis=0), v.std(axis=0, ddof=1) / np.sqrt(n)) for k, v in est.items()}


def test_uniform_normalizer():
    nb = normalizer(np.zeros(3))
    assert nb.c == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(nb.dc, 0.0, atol=1e-14)
    # E[Q_ii^2] = 1/3 under Haar, E[Q_ii Q_jj] = 0
    assert np.allclose(nb.d2, np.eye(3) / 3.0, atol=1e-12)


def test_normalizer_matches_haar_monte_carlo():
    S = np.array([5.0, 2.0, 1.0])
    nb = normalizer(S)
    mc = haar_estimate(S, 1_000_000, seed=11)
    for key, value in (("c", nb.c), ("dc", nb.dc), ("d2c", nb.d2c)):
        mean, se = mc[key]
        assert np.all(np.abs(mean - value) < 3.0 * se + 1e-15), key


@pytest.mark.parametrize("S", [(5.0, 2.0, 1.0), (10.0, 4.0, -2.0), (0.3, -0.2, 0.1), (40.0, 30.0, 20.0)])
def test_derivatives_match_finite_differences(S):
    S = np.array(S)
    nb = normalizer(S)
    h = 1e-4
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        up, dn = normalizer(S + e), normalizer(S - e)
        fd = (up.c - dn.c) / (2 * h)
        assert fd == pytest.approx(nb.dc[i], rel=1e-6)
        fd2 = (up.dc - dn.dc) / (2 * h)
        assert np.allclose(fd2, nb.d2c[i], rtol=1e-6, atol=1e-9 * nb.c)


def test_concentrated_isotropic_mean():
    d = normalizer(np.full(3, 200.0)).d
    assert np.allclose(d, 1.0 - 1.0 / 400.0, rtol=0.01)


def test_large_concentration_stays_finite():
    nb = normalizer(np.array([2000.0, 900.0, -700.0]))
    assert np.isfinite(nb.log_c)
    assert np.all(np.abs(nb.d) < 1.0) and np.all(np.isfinite(nb.d2))


def test_self_convergence():
    for S in ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [5.0, 2.0, 1.0], [10.0, 4.0, -2.0], [50.0, 50.0, 50.0]):
        S = np.array(S)
        mf.clear_caches()
        a = normalizer(S)
        b = normalizer(S, rtol=1e-12, per_panel=64, max_doublings=0)
        assert abs(a.log_c - b.log_c) < 1e-8
        assert np.max(np.abs(a.d - b.d)) < 1e-8


@given(svec)
def test_normalizer_signed_permutation_invariance(S):
    base = normalizer(S)
    for T in (S[[1, 0, 2]], S[[2, 0, 1]], S * np.array([-1.0, -1.0, 1.0]), S * np.array([1.0, -1.0, -1.0])):
        assert normalizer(T).log_c == pytest.approx(base.log_c, abs=1e-9)


@given(svec)
def test_mean_diagonal_in_range(S):
    d = normalizer(S).d
    assert np.all(np.abs(d) < 1.0)
    if np.all(S > 1e-6):
        assert np.all(d > 0)
    # def1-ordered S gives a def1-ordered mean diagonal
    Sd = np.sort(np.abs(S))[::-1] * np.array([1.0, 1.0, np.sign(np.prod(S)) or 1.0])
    dd = normalizer(Sd).d
    assert dd[0] >= dd[1] - 1e-12 and dd[1] >= abs(dd[2]) - 1e-12


def test_mean_diagonal_sign_counterexamples():
    # all pairwise sums positive, yet the first mean entry vanishes or is negative
    assert abs(normalizer(np.array([0.0, 1.0, 0.0])).d[0]) < 1e-14
    S = np.array([-0.5, 1.0, 0.6])
    Q = uniform_rotation(np.random.default_rng(21), 1_000_000)
    diag = np.stack([Q[:, 0, 0], Q[:, 1, 1], Q[:, 2, 2]], axis=1)
    f = np.exp(diag @ S)
    num = f * diag[:, 0]
    ratio = num.mean() / f.mean()
    # delta-method standard error of the ratio estimate
    se = np.std(num - ratio * f, ddof=1) / np.sqrt(f.size) / f.mean()
    d1 = normalizer(S).d[0]
    assert d1 < 0 and abs(ratio - d1) < 3 * se


def test_d_monotone_in_own_parameter():
    grid = np.linspace(-20.0, 20.0, 41)
    for base in ([3.0, 1.0, 0.5], [10.0, -4.0, 2.0]):
        for i in range(3):
            vals = []
            for g in grid:
                S = np.array(base)
                S[i] = g
                vals.append(normalizer(S).d[i])
            assert np.all(np.diff(vals) > 0)


def test_mean_matrix():
    rng = np.random.default_rng(0)
    U, V = uniform_rotation(rng), uniform_rotation(rng)
    assert np.allclose(mean_matrix(MatrixFisher.from_usv(U, np.zeros(3), V)), 0.0, atol=1e-14)
    m = MatrixFisher(np.diag([5.0, 2.0, 1.0]))
    R = m.sample(np.random.default_rng(1), 1_000_000)
    se = R.std(axis=0, ddof=1) / np.sqrt(R.shape[0])
    assert np.all(np.abs(R.mean(axis=0) - mean_matrix(m)) < 3.0 * se + 1e-12)
    sv = np.linalg.svd(mean_matrix(MatrixFisher(U @ np.diag([8.0, 3.0, -1.0]) @ V.T)), compute_uv=False)
    assert np.all((sv >= 0) & (sv < 1))


def test_solve_examples():
    assert np.array_equal(solve_s_from_d(np.zeros(3)), np.zeros(3))
    S = np.array([10.0, 4.0, -2.0])
    assert np.allclose(solve_s_from_d(normalizer(S).d), S, atol=1e-6)
    S = solve_s_from_d(np.array([0.999, 0.999, 0.999]))
    assert np.all(np.isfinite(S)) and np.all(np.abs(S) <= mf.S_CAP)
    assert np.allclose(normalizer(S).d, 0.999, atol=1e-8)


@pytest.mark.parametrize(
    "D", [(1.0, 0.5, 0.2), (0.5, 0.6, 0.1), (0.9, 0.8, 0.5), (0.3, 0.2, np.nan), (0.5, 0.4, -0.45)]
)
def test_solve_rejects_unattainable(D):
    with pytest.raises(InvalidMomentError):
        solve_s_from_d(np.array(D))


@given(st.lists(st.floats(-40.0, 40.0), min_size=3, max_size=3))
def test_solve_round_trip(S):
    S = np.sort(np.abs(S))[::-1] * np.array([1.0, 1.0, np.sign(np.prod(S)) or 1.0])
    D = normalizer(S).d
    back = solve_s_from_d(D)
    assert np.allclose(normalizer(back).d, D, atol=1e-8)


def test_density_uniform_and_principal_axes():
    assert np.allclose(MatrixFisher(np.zeros((3, 3))).density(uniform_rotation(np.random.default_rng(2), 5)), 1.0)
    rng = np.random.default_rng(3)
    U, V = uniform_rotation(rng), uniform_rotation(rng)
    S = np.array([6.0, 3.0, -1.0])
    m = MatrixFisher.from_usv(U, S, V)
    log_c = normalizer(S).log_c
    for i in range(3):
        j, k = [x for x in range(3) if x != i]
        for th in np.linspace(-np.pi, np.pi, 13):
            R = exp_so3(th * U[:, i]) @ m.mode
            expected = S[i] + (S[j] + S[k]) * np.cos(th) - log_c
            assert m.log_density(R) == pytest.approx(expected, abs=1e-10)


def test_orthogonal_group_trace_formula():
    rng = np.random.default_rng(4)
    for _ in range(20):
        F = rng.standard_normal((3, 3)) * 5
        Up, sp, Vpt = np.linalg.svd(F)
        a = rng.standard_normal(3)
        a /= np.linalg.norm(a)
        th = rng.uniform(-np.pi, np.pi)
        D = np.diag(rng.choice([-1.0, 1.0], 3))
        R = Up @ exp_so3(th * a) @ D @ Vpt
        vec = np.array([a[i] ** 2 + (1 - a[i] ** 2) * np.cos(th) for i in range(3)])
        assert np.trace(F.T @ R) == pytest.approx(sp @ D @ vec, abs=1e-10)


def euler_grid_integral(m, n_beta=300, n_angle=128):
    """Haar integral of the density on a Gauss-Legendre x trapezoid ZYZ grid."""
    x, w = np.polynomial.legendre.leggauss(n_beta)
    beta, wb = 0.5 * np.pi * (x + 1), 0.5 * np.pi * w
    t = 2 * np.pi * np.arange(n_angle) / n_angle
    A, G = np.meshgrid(t, t, indexing="ij")
    total = sum(wi * np.sin(b) * m.density(euler_zyz(A, b, G)).mean() for b, wi in zip(beta, wb))
    return total / 2.0


@pytest.mark.parametrize("S", [(50.0, 20.0, -5.0), (50.0, 50.0, 50.0), (5.0, 2.0, 1.0)])
def test_density_normalised(S):
    rng = np.random.default_rng(5)
    m = MatrixFisher.from_usv(uniform_rotation(rng), np.array(S), uniform_rotation(rng))
    assert euler_grid_integral(m) == pytest.approx(1.0, abs=0.003)
    p = m.density(uniform_rotation(rng, 1_000_000))
    assert abs(p.mean() - 1.0) < 3 * p.std(ddof=1) / np.sqrt(p.size)


def test_density_mode():
    rng = np.random.default_rng(6)
    U, V = uniform_rotation(rng), uniform_rotation(rng)
    m = MatrixFisher.from_usv(U, np.array([50.0, 20.0, -5.0]), V)
    probe = uniform_rotation(rng, 10_000)
    assert np.all(m.log_density(m.mode) >= m.log_density(probe))


def test_moments_uniform():
    m = q_moments(np.zeros(3), 3)
    assert np.allclose(m.first, 0.0, atol=1e-14)
    assert np.allclose(np.diag(m.second), 1.0 / 3.0, atol=1e-12)
    # disjoint index pairs: different rows and columns
    assert abs(m.m2(0, 0, 1, 1)) < 1e-12 and abs(m.m2(0, 1, 1, 2)) < 1e-12
    assert abs(m.m2(0, 1, 1, 0)) < 1e-12
    # E[det Q] = 1 splits evenly over the six signed permutation products
    assert m.m3(0, 0, 1, 1, 2, 2) == pytest.approx(1.0 / 6.0, abs=1e-12)
    assert m.m3(0, 1, 1, 0, 2, 2) == pytest.approx(-1.0 / 6.0, abs=1e-12)
    assert abs(m.m3(0, 0, 0, 0, 0, 0)) < 1e-12


@given(svec)
def test_moment_table_structure(S):
    m = q_moments(S, 3)
    assert np.allclose(m.first, np.diag(normalizer(S).d), atol=1e-12)
    assert np.allclose(m.second, m.second.T)
    assert np.allclose(m.third, np.transpose(m.third, (1, 0, 2)))
    assert np.allclose(m.third, np.transpose(m.third, (2, 1, 0)))
    assert np.max(np.abs(m.second)) <= 1 + 1e-12 and np.max(np.abs(m.third)) <= 1 + 1e-12
    # sum over a row of E[Q_ij Q_kl] with i = k is E[1] = 1 by orthonormality
    for i in range(3):
        assert sum(m.m2(i, j, i, j) for j in range(3)) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("S", [(5.0, 2.0, 1.0), (10.0, -4.0, 2.0), (40.0, 30.0, -20.0), (0.5, 0.0, -3.0)])
def test_moments_match_full_quadrature(S):
    S = np.array(S)
    m = q_moments(S, 3)
    rule = quadrature_rule(S)
    q = rule.q
    assert np.allclose(m.second, np.einsum("n,ni,nj->ij", rule.w, q, q), atol=1e-11)
    assert np.allclose(m.third, np.einsum("n,ni,nj,nk->ijk", rule.w, q, q, q), atol=1e-11)


def test_moments_match_sampler():
    S = np.array([5.0, 2.0, 1.0])
    m = q_moments(S, 3)
    Q = mf.sample_canonical(S, np.random.default_rng(6), 1_000_000).reshape(-1, 9)
    n = Q.shape[0]
    iu = np.triu_indices(9)
    v2 = Q[:, iu[0]] * Q[:, iu[1]]
    z2 = (v2.mean(0) - m.second[iu]) / (v2.std(0, ddof=1) / np.sqrt(n))
    trip = [(a, b, c) for a in range(9) for b in range(a, 9) for c in range(b, 9)]
    idx = np.array(trip).T
    v3 = Q[:, idx[0]] * Q[:, idx[1]] * Q[:, idx[2]]
    se3 = v3.std(0, ddof=1) / np.sqrt(n)
    ok = se3 > 0
    z3 = (v3.mean(0)[ok] - m.third[tuple(idx[:, ok])]) / se3[ok]
    z = np.abs(np.concatenate([z2[np.isfinite(z2)], z3]))
    assert z.max() < family_z(z.size)


@given(svec)
def test_nu_second_moment_forms_agree(S):
    a, b = nu_second_moment(S), nu_second_moment_from_moments(S)
    assert np.allclose(a, b, atol=1e-9 * (1 + np.abs(S).sum()))
    assert np.allclose(a, np.diag(np.diag(a)))
    assert np.all(np.diag(a) >= -1e-12)


def test_sampler_uniform_limit():
    R = MatrixFisher(np.zeros((3, 3))).sample(np.random.default_rng(7), 1_000_000)
    assert np.max(np.abs(R.mean(axis=0))) < 0.005
    assert np.allclose((R**2).mean(axis=0), 1.0 / 3.0, atol=0.005)


def test_sampler_concentrated_variance():
    rng = np.random.default_rng(8)
    U, V = uniform_rotation(rng), uniform_rotation(rng)
    m = MatrixFisher.from_usv(U, np.full(3, 200.0), V)
    R = m.sample(rng, 1_000_000)
    eta = log_so3_batch(np.einsum("ji,njk,kl->nil", U, R, V))
    assert np.allclose(eta.var(axis=0), 1.0 / 400.0, rtol=0.05)


@given(seeds)
def test_sample_shapes_and_rotations(seed):
    rng = np.random.default_rng(seed)
    m = MatrixFisher(rng.standard_normal((3, 3)) * 4)
    one = m.sample(rng)
    many = m.sample(rng, 7)
    assert one.shape == (3, 3) and many.shape == (7, 3, 3)
    assert np.allclose(np.einsum("nji,njk->nik", many, many), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(many), 1.0)


def test_hat_consistency_in_density():
    # log-density gradient at the mode vanishes along every tangent direction
    rng = np.random.default_rng(9)
    m = MatrixFisher(rng.standard_normal((3, 3)) * 3)
    eps = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        g = (m.log_density(m.mode @ exp_so3(e)) - m.log_density(m.mode @ exp_so3(-e))) / (2 * eps)
        assert abs(g) < 1e-6
    assert np.allclose(hat(np.zeros(3)), 0.0)
