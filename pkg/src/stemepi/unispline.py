"""Centered and standardized univariate B-spline bases for additive terms."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from ._validation import InputError, frozen


class DegenerateCovariateError(InputError):
    """Covariate has no variation in the sample; drop it from the model."""


class ClampWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class UniSplineBasis:
    """B-spline basis whose functions have sample mean 0 and second moment 1.

    The first raw B-spline is used up by centering, so ``J`` is one less
    than the raw basis dimension ``n_interior_knots + order``.
    """

    knots: np.ndarray = field(repr=False)
    order: int
    lower: float
    upper: float
    raw_means: np.ndarray = field(repr=False)
    scales: np.ndarray = field(repr=False)
    k: int = 0

    @property
    def J(self):
        return len(self.scales)

    def _raw(self, x):
        return BSpline.design_matrix(x, self.knots, self.order - 1).toarray()

    def transform(self, x, return_clamped=False):
        x = np.asarray(x, dtype=float).ravel()
        clamped = (x < self.lower) | (x > self.upper)
        xc = np.clip(x, self.lower, self.upper)
        raw = self._raw(xc)
        centered = raw[:, 1:] - np.outer(raw[:, 0], self.raw_means[1:] / self.raw_means[0])
        out = centered / self.scales
        if return_clamped:
            return out, clamped
        if clamped.any():
            warnings.warn(f"{clamped.sum()} values of covariate {self.k} clamped to "
                          f"[{self.lower:g}, {self.upper:g}]", ClampWarning, stacklevel=2)
        return out


def build_uni_basis(sample, order=4, n_interior_knots=2, k=0):
    """Build a centered basis from the training ``sample``.

    Interior knots sit at equally spaced sample quantiles.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise InputError(f"covariate {k} has non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0 or np.std(x) == 0:
        raise DegenerateCovariateError(f"degenerate covariate {k}: constant sample, drop from model")
    if len(x) <= order + n_interior_knots:
        raise InputError(f"covariate {k}: sample size {len(x)} too small for "
                         f"order {order} with {n_interior_knots} interior knots")
    if len(np.unique(x)) <= n_interior_knots:
        raise InputError(f"covariate {k}: need more than {n_interior_knots} distinct values")
    inner = np.quantile(x, np.arange(1, n_interior_knots + 1) / (n_interior_knots + 1))
    if n_interior_knots and (np.any(np.diff(inner) <= 0) or inner[0] <= lo or inner[-1] >= hi):
        raise InputError(f"covariate {k}: quantile knots are not distinct")
    knots = np.r_[[lo] * order, inner, [hi] * order]
    raw = BSpline.design_matrix(x, knots, order - 1).toarray()
    means = raw.mean(axis=0)
    centered = raw[:, 1:] - np.outer(raw[:, 0], means[1:] / means[0])
    scales = centered.std(axis=0)
    if np.any(scales <= 0):
        raise DegenerateCovariateError(f"covariate {k}: a centered basis function vanishes on the sample")
    return UniSplineBasis(frozen(knots), int(order), lo, hi, frozen(means), frozen(scales), int(k))


def eval_uni(basis, x):
    """Rows of centered basis values at ``x``; out-of-range values are clamped."""
    return basis.transform(x)
