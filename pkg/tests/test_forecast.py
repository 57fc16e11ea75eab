import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stemepi import forecast, glm
from stemepi.forecast import (BandError, bootstrap_bias_correct, bootstrap_paths, delete_extreme_paths,
                              envelope_band, n_deleted, predict_path, prediction_band, quantize)
from stemepi.simulate import SimDesign, simulate_panel, stem_config_for
from stemepi.stem import estimate_recovery_rate, fit_death, fit_infection


def _quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


@pytest.fixture(scope="module")
def setup():
    d = SimDesign(n_regions=36, n_days=45, mesh_n=2, seed=3, family="zip")
    panel = simulate_panel(d)
    cfg = stem_config_for(d, 13, lambda_grid=((1.0, 1.0), (100.0, 100.0)))
    past = panel.truncate(31)
    inf = _quiet(fit_infection, past, 31, cfg)
    death = _quiet(fit_death, past, 31, cfg)
    nu = estimate_recovery_rate(past, 31, cfg)
    return panel, past, cfg, inf, death, nu


def _intercept_only(fit, c, action=None):
    """Coefficients giving ``eta = c (+ action * A1)`` in every region."""
    coef = np.zeros_like(fit.coef)
    sp = fit.result.layout[2][0]
    coef[sp] = fit.basis.nullspace.T @ np.full(fit.basis.n_basis, c)
    if action is not None:
        coef[1] = action
    return fit.with_coef(coef)


# ------------------------------------------------------------ point paths

def test_constant_intercept_gives_constant_path(setup):
    _, past, _, inf, _, _ = setup
    fit = _intercept_only(inf, np.log(3.0))
    path = predict_path(fit, None, 0.0, past, 31, 6)
    expected = glm.zip_mean(3.0, glm.zip_prob(*inf.zip_params, 3.0))
    assert np.allclose(path.mu, 3.0)
    assert np.allclose(path.yhat, expected, atol=1e-5)
    steps = np.diff(np.c_[past.cum_cases[:, 31], path.C], axis=1)
    assert np.allclose(steps, expected, atol=1e-5)


def test_no_recovery_no_deaths_conserves_active(setup):
    _, past, _, inf, _, _ = setup
    path = predict_path(inf, None, 0.0, past, 31, 10)
    prev = np.c_[quantize(past.active[:, 31]), path.I[:, :-1]]
    assert np.array_equal(path.I, prev + path.yhat)
    assert not path.rhat.any() and not path.dhat.any()


@pytest.mark.parametrize("sampled", [False, True])
def test_compartments_conserved_exactly(setup, sampled):
    _, past, _, inf, death, nu = setup
    rng = np.random.default_rng(0) if sampled else None
    path = _quiet(predict_path, inf, death, nu, past, 31, 14, rng=rng)
    N = past.population[:, None]
    assert np.array_equal(path.S + path.C, np.broadcast_to(N, path.S.shape))
    assert np.array_equal(path.I, path.C - path.R - path.D)
    for arr in (path.yhat, path.dhat, path.rhat, path.I, path.S):
        assert arr.min() >= 0


def test_integer_rounding_mode(setup):
    _, past, _, inf, death, nu = setup
    path = _quiet(predict_path, inf, death, nu, past, 31, 7, resolution=1.0)
    assert np.array_equal(path.yhat, np.round(path.yhat))
    assert np.array_equal(path.I, path.C - path.R - path.D)


def test_plug_in_consistency_one_step(setup):
    panel, _, cfg, _, _, _ = setup
    inf = _quiet(fit_infection, panel.truncate(31), 31, cfg)
    death = _quiet(fit_death, panel.truncate(31), 31, cfg)
    path = predict_path(inf, death, 0.07, panel.truncate(31), 30, 1, resolution=2.0 ** -45)
    n = panel.n_regions
    assert np.abs(path.mu[:, 0] / inf.result.mu[-n:] - 1).max() <= 1e-10
    assert np.abs(path.mu_death[:, 0] / death.result.mu[-n:] - 1).max() <= 1e-10


def test_actions_carried_forward_or_scenario(setup):
    _, past, _, inf, _, _ = setup
    fit = _intercept_only(inf, np.log(2.0), action=0.5)
    A_t = past.actions[:, 0, 31]
    path = predict_path(fit, None, 0.0, past, 31, 10)
    assert np.allclose(path.mu[:, 9], 2.0 * np.exp(0.5 * A_t))
    scen = np.zeros((past.n_regions, past.p, 10))
    scen[:, 0, :] = 1.0
    path = predict_path(fit, None, 0.0, past, 31, 10, scenario=scen)
    assert np.allclose(path.mu[:, 9], 2.0 * np.exp(0.5))
    # the first seven steps only see observed actions
    assert np.allclose(path.mu[:, 0], 2.0 * np.exp(0.5 * past.actions[:, 0, 25]))


def test_saturation_caps_at_susceptible(setup):
    _, past, _, inf, _, _ = setup
    fit = _intercept_only(inf, np.log(1e9))
    with pytest.warns(RuntimeWarning, match="capped"):
        path = predict_path(fit, None, 0.0, past, 31, 3)
    assert path.saturated[:, 0].all()
    assert np.array_equal(path.S[:, 0], np.zeros(past.n_regions))
    assert not np.isnan(path.yhat).any()
    assert np.array_equal(path.S + path.C, np.broadcast_to(past.population[:, None], path.S.shape))


def test_predict_path_input_errors(setup):
    _, past, _, inf, death, nu = setup
    with pytest.raises(Exception, match="horizon"):
        predict_path(inf, death, nu, past, 31, 0)
    with pytest.raises(Exception, match="beyond"):
        predict_path(inf, death, nu, past, 40, 3)


# --------------------------------------------------------------- bootstrap

@pytest.fixture(scope="module")
def boot(setup):
    _, past, cfg, inf, death, nu = setup
    return _quiet(bootstrap_bias_correct, past, 31, cfg, 6, seed=5, inf_fit=inf, death_fit=death, nu=nu)


def test_bootstrap_is_deterministic(setup, boot):
    _, past, cfg, inf, death, nu = setup
    again = _quiet(bootstrap_bias_correct, past, 31, cfg, 6, seed=5, inf_fit=inf, death_fit=death, nu=nu)
    assert np.array_equal(again.replicate_infection, boot.replicate_infection)
    assert np.array_equal(again.corrected_death.coef, boot.corrected_death.coef)
    p1 = _quiet(bootstrap_paths, boot, past, 7, seed=1)
    p2 = _quiet(bootstrap_paths, again, past, 7, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))
    b1 = _quiet(prediction_band, boot, past, 7, alpha=0.2, seed=1)
    b2 = _quiet(prediction_band, again, past, 7, alpha=0.2, seed=1)
    assert np.array_equal(b1.lower, b2.lower) and np.array_equal(b1.upper, b2.upper)


def test_bootstrap_correction_formula(boot):
    want = 2 * boot.base_infection.coef - boot.replicate_infection.mean(axis=0)
    assert np.array_equal(boot.corrected_infection.coef, want)
    assert boot.B == 6


def test_single_identical_replicate_is_identity(setup, monkeypatch):
    _, past, cfg, inf, death, nu = setup
    monkeypatch.setattr(forecast, "_replicate_panel", lambda panel, *a: panel)
    b = _quiet(bootstrap_bias_correct, past, 31, cfg, 1, seed=0, inf_fit=inf, death_fit=death, nu=nu)
    scale = np.abs(inf.coef).max()
    assert np.abs(b.corrected_infection.coef - inf.coef).max() <= 1e-5 * scale


def test_bootstrap_paths_shapes_and_bounds(setup, boot):
    _, past, *_ = setup
    ys, ds = _quiet(bootstrap_paths, boot, past, 5, seed=2)
    assert ys.shape == ds.shape == (6, past.n_regions, 5)
    assert ys.min() >= 0 and ds.min() >= 0


def test_bootstrap_rejects_bad_B(setup):
    _, past, cfg, *_ = setup
    with pytest.raises(Exception, match="B must be"):
        bootstrap_bias_correct(past, 31, cfg, 0)


def test_bias_correction_linear_analogue():
    # ridge shrinkage is a known bias; reflecting the bootstrap mean should undo most of it
    rng = np.random.default_rng(0)
    fam = glm.Family("gaussian")
    n, k, lam, sigma = 60, 4, 30.0, 1.0
    truth = np.array([2.0, -1.5, 1.0, 3.0])
    better = 0
    for _ in range(50):
        X = rng.normal(size=(n, k))
        block = glm.DesignBlock(X, [], [], [slice(0, k)], np.zeros((n, 2), int))
        y = X @ truth + rng.normal(0, sigma, n)
        base = glm.pirls_fit(block, y, fam, lam, penalty=np.eye(k)).coef
        reps = [glm.pirls_fit(block, X @ base + rng.normal(0, sigma, n), fam, lam, penalty=np.eye(k)).coef
                for _ in range(40)]
        corrected = 2 * base - np.mean(reps, axis=0)
        better += np.linalg.norm(corrected - truth) < np.linalg.norm(base - truth)
    assert better >= 40


# ------------------------------------------------------------------- bands

def test_band_hand_example():
    paths = np.array([[0.0, 0.0], [1, 1], [2, 2], [3, 3], [100, 100]])[:, None, :]
    band = envelope_band(paths, np.array([[1.5, 1.5]]), 0.2)
    assert band.deleted.tolist() == [[4]]
    assert band.lower.tolist() == [[0.0, 0.0]] and band.upper.tolist() == [[3.0, 3.0]]
    assert band.retained == 4


def test_band_alpha_zero_is_full_envelope():
    paths = np.random.default_rng(0).poisson(5, (30, 4, 6)).astype(float)
    band = envelope_band(paths, paths.mean(0), 0.0)
    assert np.array_equal(band.lower, paths.min(0)) and np.array_equal(band.upper, paths.max(0))
    assert band.n_deleted == 0


def test_deletion_recomputes_extremes():
    # after the spike goes, the low outlier becomes the farthest extreme
    paths = np.array([[0.0, 0], [5, 5], [6, 6], [50, 50], [-20, -20]])
    assert delete_extreme_paths(paths, np.array([5.0, 5.0]), 2).tolist() == [3, 4]
    assert delete_extreme_paths(paths, np.array([5.0, 5.0]), 2, "absolute").tolist() == [3, 4]


def test_deleted_count_arithmetic():
    assert n_deleted(0.05, 200) == 10
    assert n_deleted(0.1, 30) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(10, 60), st.integers(1, 6))
def test_monotone_envelopes(seed, B, H):
    rng = np.random.default_rng(seed)
    paths = rng.gamma(2.0, 3.0, (B, 2, H))
    center = paths.mean(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bands = [envelope_band(paths, center, a) for a in (0.0, 0.05, 0.1, 0.2, 0.4)]
    for wide, narrow in zip(bands, bands[1:]):
        assert np.all(narrow.lower >= wide.lower) and np.all(narrow.upper <= wide.upper)
        assert np.all(narrow.lower <= narrow.upper)


def test_band_errors():
    paths = np.zeros((10, 1, 3))
    with pytest.warns(RuntimeWarning, match="no paths deleted"):
        envelope_band(paths, np.zeros((1, 3)), 0.05)
    with pytest.raises(BandError, match="survive"):
        envelope_band(np.zeros((2, 1, 3)), np.zeros((1, 3)), 0.5)
    with pytest.raises(BandError):
        envelope_band(paths, np.zeros((1, 3)), 1.0)
    with pytest.raises(Exception, match="distance"):
        envelope_band(paths + np.arange(10)[:, None, None], np.zeros((1, 3)), 0.2, distance="cosine")


def test_prediction_band_from_bootstrap(setup, boot):
    _, past, *_ = setup
    band = _quiet(prediction_band, boot, past, 7, alpha=0.2, seed=3)
    assert band.lower.shape == (past.n_regions, 7)
    assert np.all(band.lower <= band.upper)
    assert band.n_deleted == 1 and band.level == pytest.approx(0.8)
    deaths = _quiet(prediction_band, boot, past, 7, alpha=0.2, seed=3, target="deaths")
    assert deaths.target == "deaths"


@pytest.mark.slow
def test_bias_correction_on_simulated_panels():
    from dataclasses import replace
    from stemepi.simulate import replicate_seeds
    base_err, corr_err = [], []
    for s in replicate_seeds(11, 20):
        d = replace(SimDesign(), seed=s)
        panel, truth = simulate_panel(d, return_truth=True)
        b = _quiet(bootstrap_bias_correct, panel.truncate(31), 31, stem_config_for(d, 13), 200, seed=s)
        base_err.append(np.median(np.abs(b.base_infection.region_terms()[1] - truth["b1_inf"])))
        corr_err.append(np.median(np.abs(b.corrected_infection.region_terms()[1] - truth["b1_inf"])))
    print(f"median |b1 error|: base {np.median(base_err):.4f} corrected {np.median(corr_err):.4f}")
    assert np.median(corr_err) <= np.median(base_err)
