import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from stemepi import glm
from stemepi.bpst import build_basis, eval_basis
from stemepi.mesh import grid_mesh

BASIS = build_basis(grid_mesh(3, 3), 2, 1)


def parametric(F):
    F = np.asarray(F, float)
    return glm.DesignBlock(F, [f"x{j}" for j in range(F.shape[1])], [], [], np.zeros((len(F), 2)))


def spatial(pts, extra=None):
    B = eval_basis(BASIS, pts) @ BASIS.nullspace
    cols = [] if extra is None else [extra]
    F = np.column_stack(cols + [B])
    n_par = F.shape[1] - B.shape[1]
    return glm.DesignBlock(F, [f"x{j}" for j in range(n_par)], [], [slice(n_par, F.shape[1])],
                           np.zeros((len(F), 2)))


def test_identity_hook_matches_least_squares():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(200, 6))
    y = F @ rng.normal(size=6) + rng.normal(size=200)
    fit = glm.pirls_fit(parametric(F), y, glm.Family("gaussian"))
    ols = np.linalg.solve(F.T @ F, F.T @ y)
    assert np.abs(fit.coef - ols).max() <= 1e-8


def test_intercept_only_poisson():
    y = np.random.default_rng(1).poisson(3.7, 500)
    fit = glm.pirls_fit(parametric(np.ones((500, 1))), y, glm.Family("poisson"))
    assert np.allclose(fit.mu, y.mean(), rtol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_poisson_score_equations(seed):
    rng = np.random.default_rng(seed)
    F = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
    y = rng.poisson(np.exp(0.5 + F[:, 1:] @ rng.uniform(-0.4, 0.4, 3)))
    fit = glm.pirls_fit(parametric(F), y, glm.Family("poisson"))
    assert np.abs(F.T @ (y - fit.mu)).max() <= 1e-6


def test_penalty_shrinks_to_zero_energy():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1, (400, 2))
    y = rng.poisson(np.exp(1 + np.sin(3 * pts[:, 0]) * pts[:, 1]))
    design = spatial(pts)
    K = BASIS.reduced_penalty()
    energies = []
    for lam in 10.0 ** np.arange(0, 9):
        fit = glm.pirls_fit(design, y, glm.Family("poisson"), lam, penalty=K)
        th = fit.theta_star[0]
        energies.append(th @ K @ th)
    assert np.all(np.diff(energies) <= 1e-12)
    assert energies[-1] <= 1e-6 * energies[0]


def test_constraints_preserved():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1, (300, 2))
    y = rng.poisson(np.exp(1 + pts[:, 0]))
    fit = glm.pirls_fit(spatial(pts), y, glm.Family("poisson"), 1.0, penalty=BASIS.penalty,
                        nullspace=BASIS.nullspace)
    theta = BASIS.nullspace @ fit.theta_star[0]
    assert np.abs(BASIS.constraints @ theta).max() <= 1e-8


def test_objective_monotone():
    ok = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 1, (150, 2))
        y = rng.poisson(np.exp(rng.normal(1, 0.5) + rng.normal() * pts[:, 0]))
        fit = glm.pirls_fit(spatial(pts), y, glm.Family("poisson"), 1.0, penalty=BASIS.reduced_penalty())
        ok += np.all(np.diff(fit.objective_path) <= 1e-9 * abs(fit.objective_path[0]))
    assert ok >= 0.95 * 40


def test_step_halving_path_with_bad_start():
    rng = np.random.default_rng(4)
    F = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = rng.poisson(np.exp(1 + 0.3 * F[:, 1]))
    fit = glm.pirls_fit(parametric(F), y, glm.Family("poisson"), init=np.array([4.0, 3.0]))
    assert fit.converged
    assert np.all(np.diff(fit.objective_path) <= 1e-9 * fit.objective_path[0])


def test_singular_system():
    F = np.column_stack([np.ones(50), np.ones(50)])
    with pytest.raises(glm.SingularSystemError):
        glm.pirls_fit(parametric(F), np.arange(50) % 4, glm.Family("poisson"))


def test_fixed_columns_stay_zero():
    rng = np.random.default_rng(5)
    F = np.column_stack([np.ones(100), np.zeros(100), rng.normal(size=100)])
    design = parametric(F)
    design.fixed = np.array([False, True, False])
    fit = glm.pirls_fit(design, rng.poisson(2.0, 100), glm.Family("poisson"))
    assert fit.coef[1] == 0.0


def test_nb_variance_and_fit():
    fam = glm.Family("nb")
    assert np.allclose(fam.variance(np.array([2.0]), np.array([4.0])), 3.0)
    with pytest.raises(ValueError):
        fam.variance(np.array([1.0]))
    rng = np.random.default_rng(6)
    F = np.column_stack([np.ones(400), rng.normal(size=400)])
    k = rng.uniform(5, 50, 400)
    mu = np.exp(1.5 + 0.4 * F[:, 1])
    y = rng.negative_binomial(k, k / (k + mu))
    design = parametric(F)
    design.exposure = k
    fit = glm.pirls_fit(design, y, fam)
    assert fit.converged
    assert fit.coef == pytest.approx([1.5, 0.4], abs=0.1)


def test_gcv_single_point():
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 1, (100, 2))
    lam = glm.gcv_select(spatial(pts), rng.poisson(3, 100), glm.Family("poisson"), [(5.0, 0.0)],
                         penalty=BASIS.reduced_penalty())
    assert lam == (5.0, 0.0)


def test_gcv_noise_prefers_smooth():
    # rough candidates are far apart from the near-affine fit at the top of the grid
    grid = [(1e-3, 0.0), (1e-2, 0.0), (1e-1, 0.0), (1e4, 0.0)]
    K = BASIS.reduced_penalty()
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 1, (400, 2))
        lam = glm.gcv_select(spatial(pts), rng.poisson(5.0, 400), glm.Family("poisson"), grid, penalty=K)
        hits += lam == grid[-1]
    assert hits >= 40


def test_gcv_signal_prefers_rough():
    # curved surface inside the spline space, counts large enough that noise is negligible
    grid = [(1e-1, 0.0), (1e1, 0.0), (1e3, 0.0), (1e5, 0.0)]
    K = BASIS.reduced_penalty()
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 1, (400, 2))
        u1, u2 = pts.T
        mu = np.exp(6 + 2 * (u1 - 0.5) ** 2 - 1.5 * u1 * u2 + u2 ** 2)
        lam = glm.gcv_select(spatial(pts), rng.poisson(mu), glm.Family("poisson"), grid, penalty=K)
        hits += lam == grid[0]
    assert hits >= 40


def test_gcv_empty_grid():
    with pytest.raises(ValueError):
        glm.gcv_select(parametric(np.ones((5, 1))), np.ones(5), glm.Family("poisson"), [])


# ------------------------------------------------------------------ ZIP law

@pytest.mark.parametrize("mu", [0.1, 1.0, 5.0, 20.0])
@pytest.mark.parametrize("p", [0.0, 0.3, 1.0])
def test_pmf_normalised(mu, p):
    total = glm.zip_pmf(np.arange(0, 200), mu, p).sum()
    assert abs(total - 1) <= 1e-12


def test_pmf_sum_example():
    assert glm.zip_pmf(np.arange(0, 101), 3.0, 0.7).sum() >= 1 - 1e-12


def test_pmf_values():
    assert glm.zip_pmf(0, 2.0, 0.4) == pytest.approx(0.6)
    assert glm.zip_pmf(3, 2.0, 0.4) == pytest.approx(0.4 * 8 / 6 / (np.e ** 2 - 1))
    assert glm.zip_pmf(np.arange(5), 1.5, 0.0).tolist() == [1, 0, 0, 0, 0]


def test_mean_example():
    assert float(glm.zip_mean(2.0, 0.5)) == pytest.approx(1.15652, abs=5e-6)


def test_sampler_mean_and_point_mass():
    rng = np.random.default_rng(8)
    draws = glm.zip_sample(2.0, 0.5, rng, size=10 ** 6)
    se = np.sqrt(glm.zip_variance(2.0, 0.5) / 10 ** 6)
    assert abs(draws.mean() - glm.zip_mean(2.0, 0.5)) <= 3 * se
    assert not glm.zip_sample(3.0, 0.0, rng, size=1000).any()


def test_sampler_rejects_nonpositive_mu():
    with pytest.raises(ValueError):
        glm.zip_sample(np.array([1.0, 0.0]), 0.5, 0)
    with pytest.raises(ValueError):
        glm.zip_pmf(1, -1.0, 0.5)


@pytest.mark.parametrize("mu", [0.05, 0.7, 1.0, 6.0, 40.0])
def test_truncated_sampler(mu):
    rng = np.random.default_rng(9)
    d = glm.ztp_sample(np.full(200_000, mu), rng)
    assert d.min() >= 1
    mean = mu / -np.expm1(-mu)
    var = (mu + mu ** 2) / -np.expm1(-mu) - mean ** 2
    assert abs(d.mean() - mean) <= 4 * np.sqrt(var / len(d))


def test_profile_all_positive():
    mu = np.random.default_rng(10).uniform(0.5, 5, 300)
    a1, _ = glm.zip_profile(mu, np.ones(300))
    assert a1 == pytest.approx(glm.A1_BOX[1], abs=1e-3)


def test_profile_all_zero_warns():
    with pytest.warns(RuntimeWarning):
        assert glm.zip_profile(np.ones(10), np.zeros(10)) == (glm.A1_BOX[0], glm.A2_BOX[0])


def _zip_data(a1, a2, n, seed):
    rng = np.random.default_rng(seed)
    mu = np.exp(rng.normal(0.5, 1.0, n))
    y = glm.zip_sample(mu, glm.zip_prob(a1, a2, mu), rng)
    return mu, y


@pytest.mark.parametrize("method", ["lbfgs", "golden"])
def test_profile_recovers_parameters(method):
    mu, y = _zip_data(-1.0, 0.5, 5000, 11)
    a1, a2 = glm.zip_profile(mu, y, method=method)
    assert a1 == pytest.approx(-1.0, abs=0.15)
    assert a2 == pytest.approx(0.5, abs=0.15)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 1.5), st.integers(0, 2**31 - 1))
def test_profile_methods_agree(a1, a2, seed):
    mu, y = _zip_data(a1, a2, 800, seed)
    if y.all() or not y.any():
        return
    g = glm.zip_profile(mu, y, method="golden")
    b = glm.zip_profile(mu, y, method="lbfgs")

    def nll(par):
        return -np.sum(glm.zip_logpmf(y, mu, glm.zip_prob(par[0], par[1], mu)))

    assert nll(b) <= nll(g) + 1e-6 * max(1.0, abs(nll(g)))


def test_profile_constant_mean_half():
    rng = np.random.default_rng(12)
    mu = np.full(4000, 3.0)
    y = glm.zip_sample(mu, 0.5, rng)
    a1, a2 = glm.zip_profile(mu, y)
    p = float(glm.zip_prob(a1, a2, 3.0))
    assert p == pytest.approx(np.mean(y > 0), abs=1e-4)
    assert np.mean(y == 0) == pytest.approx(0.5, abs=0.03)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 500), st.floats(-4, 4), st.floats(-3, 2))
def test_match_mean(target, a1, a2):
    mu = glm.zip_match_mean(np.array([target]), a1, a2)
    got = glm.zip_mean(mu, glm.zip_prob(a1, a2, mu))
    infimum = glm.zip_mean(glm.MU_FLOOR, glm.zip_prob(a1, a2, glm.MU_FLOOR))
    if target > 2 * infimum:
        assert got[0] == pytest.approx(target, rel=1e-8)


def test_sample_counts_matched_mean():
    rng = np.random.default_rng(13)
    mu = np.full(400_000, 1.3)
    y = glm.sample_counts(glm.Family("zip"), mu, rng, zip_params=(0.5, -0.5), match_mean=True)
    assert y.mean() == pytest.approx(1.3, rel=0.01)


def _hurdle_regression(n, seed, beta=(0.3, 1.0), params=(2.0, -1.0)):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, n)
    F = np.column_stack([np.ones(n), x])
    mu = np.exp(F @ beta)
    return F, glm.zip_sample(mu, glm.zip_prob(*params, mu), rng)


def test_joint_zip_matches_direct_likelihood():
    F, y = _hurdle_regression(3000, 21)
    fit = glm.pirls_fit(parametric(F), y, glm.Family("zip"), tol=1e-10)

    def nll(par):
        eta = F @ par[:2]
        mu = np.exp(eta)
        return -np.sum(glm.zip_logpmf(y, mu, glm.zip_prob(par[2], par[3], mu)))

    direct = scipy.optimize.minimize(nll, np.zeros(4), method="Nelder-Mead",
                                     options=dict(xatol=1e-9, fatol=1e-10, maxiter=20000, maxfev=20000))
    assert fit.converged
    np.testing.assert_allclose(fit.coef, direct.x[:2], atol=1e-4)
    np.testing.assert_allclose(fit.zip_params, direct.x[2:], atol=1e-3)
    assert nll(np.r_[fit.coef, fit.zip_params]) <= direct.fun + 1e-6


def test_joint_zip_slope_is_unbiased():
    # a marginal-mean Poisson fit flattens the slope when the hurdle is active
    est = []
    for seed in range(8):
        F, y = _hurdle_regression(2000, seed)
        est.append(glm.pirls_fit(parametric(F), y, glm.Family("zip")).coef[1])
    assert np.mean(est) == pytest.approx(1.0, abs=0.03)


def test_zip_moments():
    fam = glm.Family("zip", (0.5, -0.5))
    mu = np.array([0.1, 1.0, 7.0])
    mean, var = fam.moments(mu)
    p = glm.zip_prob(0.5, -0.5, mu)
    np.testing.assert_allclose(mean, glm.zip_mean(mu, p))
    np.testing.assert_allclose(var, glm.zip_variance(mu, p))
    np.testing.assert_allclose(glm.Family("poisson").moments(mu), (mu, mu))


def test_penalized_glm_estimator():
    rng = np.random.default_rng(14)
    X = np.column_stack([np.ones(300), rng.normal(size=300)])
    y = rng.poisson(np.exp(0.2 + 0.5 * X[:, 1]))
    est = glm.PenalizedGLM().fit(X, y)
    assert est.coef_ == pytest.approx([0.2, 0.5], abs=0.15)
    assert est.predict(X).shape == (300,)
    assert clone(est).get_params()["family"] == "poisson"
