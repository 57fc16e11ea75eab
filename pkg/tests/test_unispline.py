import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stemepi.unispline import ClampWarning, DegenerateCovariateError, build_uni_basis, eval_uni


@pytest.fixture(scope="module")
def sample():
    return np.random.default_rng(0).uniform(0, 1, 500)


def test_cubic_two_knots_keeps_five(sample):
    assert build_uni_basis(sample, order=4, n_interior_knots=2).J == 5


def test_centering_and_scaling(sample):
    Phi = eval_uni(build_uni_basis(sample), sample)
    assert np.abs(Phi.mean(axis=0)).max() <= 1e-10
    assert np.abs((Phi ** 2).mean(axis=0) - 1).max() <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 400), st.integers(0, 4), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_moments_property(n, knots, order, seed):
    x = np.random.default_rng(seed).gamma(2.0, size=n)
    b = build_uni_basis(x, order=order, n_interior_knots=knots)
    Phi = eval_uni(b, x)
    assert Phi.shape == (n, knots + order - 1)
    assert np.abs(Phi.mean(axis=0)).max() <= 1e-10
    assert np.abs((Phi ** 2).mean(axis=0) - 1).max() <= 1e-8


def test_any_combination_has_mean_zero(sample):
    b = build_uni_basis(sample)
    xi = np.random.default_rng(1).normal(size=b.J)
    assert abs(np.mean(eval_uni(b, sample) @ xi)) <= 1e-10


def test_clamping_flags(sample):
    b = build_uni_basis(sample)
    with pytest.warns(ClampWarning):
        low = eval_uni(b, [-5.0])
    assert np.allclose(low, eval_uni(b, [b.lower]))
    vals, flags = b.transform([b.lower - 1, 0.5, b.upper + 1], return_clamped=True)
    assert flags.tolist() == [True, False, True]
    assert np.allclose(vals[2], eval_uni(b, [b.upper])[0])


def test_repeated_value_identical_rows(sample):
    b = build_uni_basis(sample)
    rows = eval_uni(b, np.full(7, 0.37))
    assert np.all(rows == rows[0])


def test_fit_known_function(sample):
    b = build_uni_basis(sample)
    f = np.sin(2 * np.pi * sample)
    Phi = np.column_stack([np.ones(len(sample)), eval_uni(b, sample)])
    coef = np.linalg.lstsq(Phi, f, rcond=None)[0]
    grid = np.linspace(0.05, 0.95, 200)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fitted = coef[0] + eval_uni(b, grid) @ coef[1:]
    assert np.abs(fitted - np.sin(2 * np.pi * grid)).max() <= 0.05


def test_linear_reproduction(sample):
    b = build_uni_basis(sample)
    Phi = eval_uni(b, sample)
    target = 3 * sample - np.mean(3 * sample)
    coef = np.linalg.lstsq(Phi, target, rcond=None)[0]
    assert np.abs(Phi @ coef - target).max() <= 1e-8


def test_degenerate_covariate():
    with pytest.raises(DegenerateCovariateError):
        build_uni_basis(np.full(50, 2.0))


def test_too_small_sample():
    with pytest.raises(ValueError, match="too small"):
        build_uni_basis(np.arange(5.0), order=4, n_interior_knots=2)


def test_frozen_constants_used_at_prediction(sample):
    b = build_uni_basis(sample)
    new = np.random.default_rng(9).uniform(0.2, 0.8, 100)
    # transform of new data uses training means, so its mean is generally not zero
    assert np.abs(eval_uni(b, new).mean(axis=0)).max() > 1e-3
