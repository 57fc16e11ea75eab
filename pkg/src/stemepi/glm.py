"""Quasi-likelihood machinery and the penalized IRLS solver.

The solver minimizes ``deviance/2 + sum_l lambda_l/2 * theta_l' K theta_l``
where ``K = Q2' P Q2`` is the reduced spline energy and ``theta_l`` are the
column blocks of the design holding reduced spline coefficients.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit, gammaln, log_expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from ._validation import InputError, check_counts, check_rng

LOG_EPS = 1.0
MU_FLOOR = 1e-10


class SolverError(RuntimeError):
    """PIRLS could not produce a finite, well-posed fit."""


class DivergenceError(SolverError):
    pass


class SingularSystemError(SolverError):
    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"penalized normal equations are singular (condition estimate {cond:.3g})")


# ---------------------------------------------------------------- families

@dataclass(frozen=True)
class Family:
    """Response family with a log link (identity for the Gaussian test hook).

    ``kind`` is one of ``poisson``, ``nb``, ``zip`` or ``gaussian``. The NB
    variance ``mu (1 + mu / exposure)`` needs a per-row ``exposure`` (the
    lagged active count). For ``zip``, ``mu`` is the Poisson parameter and
    ``zip_params = (a1, a2)`` link the non-zero probability to it; without
    them the family falls back to Poisson working quantities.
    """

    kind: str = "poisson"
    zip_params: tuple = None

    def __post_init__(self):
        if self.kind not in ("poisson", "nb", "zip", "gaussian"):
            raise InputError(f"unknown family {self.kind!r}")

    @property
    def identity(self):
        return self.kind == "gaussian"

    def link(self, mu):
        return mu if self.identity else np.log(mu)

    def inverse(self, eta):
        return eta if self.identity else np.exp(eta)

    def dlink(self, mu):
        return np.ones_like(mu) if self.identity else 1.0 / mu

    def variance(self, mu, exposure=None):
        if self.identity:
            return np.ones_like(mu)
        if self.kind == "nb":
            if exposure is None:
                raise InputError("negative binomial variance needs an exposure vector")
            return mu * (1.0 + mu / exposure)
        return mu

    @property
    def joint_zip(self):
        return self.kind == "zip" and self.zip_params is not None

    def moments(self, mu, exposure=None):
        """Mean and variance of the response given ``mu``."""
        if self.joint_zip:
            p = zip_prob(*self.zip_params, mu)
            return zip_mean(mu, p), zip_variance(mu, p)
        return mu, self.variance(mu, exposure)

    def working(self, y, eta, mu, exposure=None):
        """Fisher-scoring weights and working response for ``eta``."""
        if self.joint_zip:
            a1, a2 = self.zip_params
            s = np.exp(a2)
            p = expit(a1 + s * eta)
            m = _ztp_mean(mu)
            pos = y > 0
            score = np.where(pos, s * (1.0 - p) + y - m, -s * p)
            info = s ** 2 * p * (1.0 - p) + p * m * (1.0 + mu - m)
            info = np.maximum(info, 1e-300)
            return info, eta + score / info
        g1 = self.dlink(mu)
        return 1.0 / (self.variance(mu, exposure) * g1 ** 2), g1 * (y - mu) + eta

    def deviance(self, y, mu, exposure=None):
        """Per-observation (quasi-)deviance contributions.

        For ``zip`` with link parameters this is ``-2`` times the log-likelihood.
        """
        if self.identity:
            return (y - mu) ** 2
        if self.joint_zip:
            return -2.0 * zip_logpmf(y, mu, zip_prob(*self.zip_params, mu))
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
        if self.kind == "nb":
            k = exposure

            def q(m):
                m = np.maximum(m, MU_FLOOR)
                return np.where(y > 0, y * np.log(m / (1 + m / k)), 0.0) - k * np.log1p(m / k)

            ysafe = np.where(y > 0, y, 1.0)
            q_sat = np.where(y > 0, y * np.log(ysafe / (1 + ysafe / k)) - k * np.log1p(ysafe / k), 0.0)
            return 2.0 * (q_sat - q(mu))
        return 2.0 * (ylogy - (y - mu))


# ------------------------------------------------------------------ design

@dataclass
class DesignBlock:
    """Model matrix with its column partition.

    Columns are ``[parametric | additive | spatial_0 (| spatial_1)]``.
    ``rows`` holds ``(region index, day)`` for every row, ordered by day then
    region. Columns flagged in ``fixed`` are all zero and their coefficients
    are held at zero.
    """

    F: np.ndarray
    param_names: list
    additive: list
    spatial: list
    rows: np.ndarray
    exposure: np.ndarray = None
    weights: np.ndarray = None
    fixed: np.ndarray = None

    def __post_init__(self):
        widths = len(self.param_names) + sum(s.stop - s.start for s in self.additive) \
            + sum(s.stop - s.start for s in self.spatial)
        if widths != self.F.shape[1]:
            raise InputError(f"column partition widths {widths} != design width {self.F.shape[1]}")
        if self.weights is None:
            self.weights = np.ones(self.F.shape[0])
        if self.fixed is None:
            self.fixed = np.zeros(self.F.shape[1], bool)

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def width(self):
        return self.F.shape[1]


@dataclass
class FitResult:
    coef: np.ndarray
    alpha: np.ndarray
    xi: list
    theta_star: list
    lambdas: tuple
    mu: np.ndarray
    eta: np.ndarray
    deviance: float
    pearson: float
    edf: float
    iterations: int
    converged: bool
    objective_path: list = field(default_factory=list, repr=False)
    zip_params: tuple = None
    n_obs: int = 0
    gcv: float = np.nan
    layout: tuple = field(default=None, repr=False)

    def with_coef(self, coef, design=None):
        """Copy with a replacement coefficient vector (fitted values refreshed if ``design`` given)."""
        coef = np.asarray(coef, float)
        out = FitResult(**{**self.__dict__, "coef": coef})
        out.alpha, out.xi, out.theta_star = _split(coef, self.layout)
        if design is not None:
            out.eta = design.F @ coef
            out.mu = np.exp(out.eta)
        return out


def _layout(design):
    return (design.n_params, list(design.additive), list(design.spatial))


def _split(coef, layout):
    n_par, additive, spatial = layout
    return coef[:n_par].copy(), [coef[s].copy() for s in additive], [coef[s].copy() for s in spatial]


def penalty_matrix(design, lambdas, reduced_penalty):
    S = np.zeros((design.width, design.width))
    for lam, sl in zip(lambdas, design.spatial):
        S[sl, sl] += lam * reduced_penalty
    return S


def _reduce(penalty, nullspace):
    if nullspace is None:
        return np.asarray(penalty, float)
    K = nullspace.T @ penalty @ nullspace
    return (K + K.T) / 2


def _solve(A, b):
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        x = scipy.linalg.cho_solve((c, low), b, check_finite=False)
        if np.all(np.isfinite(x)):
            return x, (c, low)
    except (np.linalg.LinAlgError, ValueError):
        pass
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSystemError(cond)
    x = scipy.linalg.solve(A, b, assume_a="sym", check_finite=False)
    return x, None


def pirls_fit(design, y, family, lam0=0.0, lam1=0.0, penalty=None, nullspace=None,
              init=None, tol=1e-6, max_iter=100, max_halving=10):
    """Penalized iteratively reweighted least squares.

    Parameters
    ----------
    design : DesignBlock
    y : array of counts (real responses for the Gaussian hook)
    family : Family
    lam0, lam1 : smoothing parameters for the spatial blocks
    penalty, nullspace : full energy matrix ``P`` and null-space basis ``Q2``.
        Pass ``nullspace=None`` when ``penalty`` is already reduced.
    init : optional starting coefficient vector

    For ``zip`` the coefficients model the Poisson parameter of the hurdle
    law. Fisher scoring on ``eta`` alternates with profiling ``(a1, a2)``,
    starting from ``family.zip_params`` when given.
    """
    y = np.asarray(y, float).ravel() if family.identity else check_counts(y)
    F = design.F
    if F.shape[0] != len(y):
        raise InputError(f"design has {F.shape[0]} rows but y has {len(y)}")
    if not np.all(np.isfinite(F)):
        raise InputError("design matrix contains non-finite entries")
    lambdas = (float(lam0), float(lam1))[:max(len(design.spatial), 1)]
    if any(l < 0 for l in lambdas):
        raise InputError("smoothing parameters must be non-negative")
    S = np.zeros((F.shape[1], F.shape[1]))
    if design.spatial:
        S = penalty_matrix(design, lambdas, _reduce(penalty, nullspace))
    fixed = np.flatnonzero(design.fixed)
    S[fixed, fixed] += 1.0
    w_row = design.weights
    expo = design.exposure
    joint = family.kind == "zip" and np.any(y > 0)
    if joint:
        # Poisson start, then link (a1, a2) to the current Poisson parameter
        if init is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                init = pirls_fit(design, y, Family("poisson"), lam0, lam1, penalty, nullspace,
                                 tol=max(tol, 1e-4), max_iter=max_iter).coef
        start = family.zip_params if family.zip_params is not None else (0.0, 0.0)
        mu0 = np.maximum(np.exp(np.minimum(F @ init, 700.0)), MU_FLOOR)
        family = Family("zip", tuple(zip_profile(mu0, y, start=start)))
    elif family.kind == "zip":
        family = Family("zip")

    def objective(coef, mu):
        return 0.5 * np.sum(w_row * family.deviance(y, mu, expo)) + 0.5 * coef @ S @ coef

    if init is None:
        mu = y + 0.1 if not family.identity else y.copy()
        eta = family.link(mu)
        coef, obj_old = None, np.inf
    else:
        coef = np.asarray(init, float)
        eta = F @ coef
        mu = family.inverse(eta)
        if not family.identity:
            mu = np.maximum(mu, MU_FLOOR)
        obj_old = objective(coef, mu)

    path = [] if coef is None else [obj_old]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        param_change = 0.0
        if joint and it > 1:
            params = tuple(zip_profile(mu, y, start=family.zip_params))
            param_change = np.max(np.abs(np.subtract(params, family.zip_params)))
            param_change /= max(1.0, np.max(np.abs(params)))
            family = Family("zip", params)
            obj_old = objective(coef, mu)
        w, z = family.working(y, eta, mu, expo)
        w = w_row * w
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(z))):
            raise DivergenceError(f"non-finite working weights at iteration {it} "
                                  f"(max eta {np.nanmax(eta):.3g})")
        FtW = F.T * w
        new, _ = _solve(FtW @ F + S, FtW @ z)
        eta_new = F @ new
        mu_new = family.inverse(eta_new)
        obj = objective(new, mu_new) if np.all(np.isfinite(mu_new)) else np.inf
        halvings = 0
        while coef is not None and not obj <= obj_old + 1e-12 * abs(obj_old) and halvings < max_halving:
            new = 0.5 * (coef + new)
            eta_new = F @ new
            mu_new = family.inverse(eta_new)
            obj = objective(new, mu_new) if np.all(np.isfinite(mu_new)) else np.inf
            halvings += 1
        if not np.all(np.isfinite(mu_new)):
            raise DivergenceError(f"fitted means overflow at iteration {it}")
        change = np.inf if coef is None else np.max(np.abs(new - coef)) / max(1.0, np.max(np.abs(new)))
        coef, eta, mu, obj_old = new, eta_new, np.maximum(mu_new, MU_FLOOR) if not family.identity else mu_new, obj
        path.append(obj)
        if change <= tol and param_change <= tol:
            converged = True
            break

    w, z = family.working(y, eta, mu, expo)
    w = w_row * w
    FtWF = (F.T * w) @ F
    A = FtWF + S
    try:
        edf = float(np.trace(scipy.linalg.solve(A, FtWF, assume_a="sym")))
    except np.linalg.LinAlgError:
        edf = float("nan")
    dev = float(np.sum(w_row * family.deviance(y, mu, expo)))
    # working-residual form; equals the Pearson statistic for exponential families
    pearson = float(np.sum(w * (z - eta) ** 2))
    layout = _layout(design)
    alpha, xi, theta = _split(coef, layout)
    res = FitResult(coef=coef, alpha=alpha, xi=xi, theta_star=theta,
                    lambdas=tuple(lambdas), mu=mu, eta=eta, deviance=dev, pearson=pearson,
                    edf=edf, iterations=it, converged=converged, objective_path=path,
                    n_obs=int(np.sum(w_row > 0)), layout=layout, zip_params=family.zip_params)
    if not converged:
        warnings.warn(f"PIRLS did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    return res


def gcv_score(fit):
    n = fit.n_obs
    return n * fit.pearson / (n - fit.edf) ** 2


def gcv_select(design, y, family, lambda_grid, penalty=None, nullspace=None, return_fit=False):
    """Grid point minimizing ``n * D / (n - tr S)**2``; ties go to the larger ``sum(lambda)``."""
    grid = [tuple(float(v) for v in g) for g in lambda_grid]
    if not grid:
        raise InputError("lambda grid is empty")
    K = _reduce(penalty, nullspace) if design.spatial else None
    best = None
    init = None
    # descending order so that ties keep the smoother candidate
    for lam in sorted(grid, key=lambda g: (-sum(g), [-v for v in g])):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = pirls_fit(design, y, family, *(lam + (0.0,))[:2], penalty=K, init=init)
        except SolverError:
            continue
        if not fit.converged:
            continue
        fit.gcv = gcv_score(fit)
        init = fit.coef
        if best is None or fit.gcv < best.gcv:
            best = fit
    if best is None:
        raise SolverError("no grid point converged")
    lam = tuple(best.lambdas) + (0.0,) * (2 - len(best.lambdas))
    return (lam, best) if return_fit else lam


# --------------------------------------------------------------------- ZIP

def zip_logpmf(y, mu, p):
    """Log-probability of the zero-inflated (hurdle form) Poisson law."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    p = np.asarray(p, float)
    with np.errstate(divide="ignore"):
        log_trunc = y * np.log(mu) - (mu + np.log(-np.expm1(-mu))) - gammaln(y + 1)
        return np.where(y == 0, np.log1p(-p), np.log(p) + log_trunc)


def zip_pmf(y, mu, p):
    if np.any(np.asarray(mu) <= 0):
        raise InputError("ZIP mean parameter must be positive")
    return np.exp(zip_logpmf(y, mu, p))


def _ztp_mean(mu):
    mu = np.asarray(mu, float)
    safe = np.maximum(mu, 1e-8)
    return np.where(mu > 1e-8, safe / -np.expm1(-safe), 1.0 + mu / 2)


def zip_mean(mu, p):
    mu = np.asarray(mu, float)
    return p * mu / -np.expm1(-mu)


def zip_variance(mu, p):
    mu = np.asarray(mu, float)
    m1 = mu / -np.expm1(-mu)
    m2 = (mu + mu ** 2) / -np.expm1(-mu)
    return p * m2 - (p * m1) ** 2


def ztp_sample(mu, rng, max_rounds=1000):
    """Zero-truncated Poisson draws.

    Means below 1 use sequential inversion; larger means use rejection,
    which accepts with probability at least ``1 - exp(-1)``.
    """
    mu = np.asarray(mu, float)
    out = np.zeros(mu.shape, dtype=np.int64)
    small = mu < 1.0
    if small.any():
        m = mu[small]
        u = rng.random(m.shape)
        k = np.ones(m.shape, dtype=np.int64)
        pk = m / np.expm1(m)
        cdf = pk.copy()
        todo = u > cdf
        while todo.any():
            k[todo] += 1
            pk[todo] *= m[todo] / k[todo]
            cdf[todo] += pk[todo]
            todo &= (u > cdf) & (pk > 0)
        out[small] = k
    big = np.flatnonzero(~small)
    if big.size:
        draw = rng.poisson(mu[big])
        todo = np.flatnonzero(draw == 0)
        rounds = 0
        while todo.size and rounds < max_rounds:
            draw[todo] = rng.poisson(mu[big][todo])
            todo = todo[draw[todo] == 0]
            rounds += 1
        draw[todo] = 1
        out[big] = draw
    return out


def zip_sample(mu, p, rng=None, size=None):
    """Draw ZIP counts: zero with probability ``1 - p``, else truncated Poisson."""
    rng = check_rng(rng)
    mu = np.asarray(mu, float)
    if np.any(mu <= 0):
        raise InputError("ZIP mean parameter must be positive")
    if size is not None:
        mu = np.broadcast_to(mu, size)
    p = np.broadcast_to(np.asarray(p, float), mu.shape)
    keep = rng.random(mu.shape) < p
    out = np.zeros(mu.shape, dtype=np.int64)
    if keep.any():
        out[keep] = ztp_sample(mu[keep], rng)
    return out


def zip_prob(a1, a2, mu, b0=0.0):
    """Non-zero probability ``expit(a1 + (b0 + exp(a2)) log mu)``."""
    return expit(a1 + (b0 + np.exp(a2)) * np.log(mu))


A1_BOX = (-20.0, 20.0)
A2_BOX = (-10.0, 5.0)
_GOLD = (np.sqrt(5) - 1) / 2


def golden_section(f, lo, hi, tol=1e-6):
    """Minimize a unimodal scalar function on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    cands = [(f(lo), lo), (f(x), x), (f(hi), hi)]
    return min(cands)[1]


def _zip_profile_golden(L, pos, b0, tol, max_sweeps, start):
    Lp, Lz = L[pos], L[~pos]

    def nll(a1, a2):
        s = b0 + np.exp(a2)
        return -(np.sum(log_expit(a1 + s * Lp)) + np.sum(log_expit(-(a1 + s * Lz))))

    def nll_centered(c, a2):
        return nll(c - (b0 + np.exp(a2)) * Lc, a2)

    # searching the intercept at the mean of log mu decorrelates the two directions
    Lc = L.mean()
    c, a2 = start[0] + (b0 + np.exp(start[1])) * Lc, start[1]
    c_box = (A1_BOX[0] - 20.0, A1_BOX[1] + 20.0)
    best = nll_centered(c, a2)
    for _ in range(max_sweeps):
        c_new = golden_section(lambda v: nll_centered(v, a2), *c_box, tol=tol)
        a2_new = golden_section(lambda v: nll_centered(c_new, v), *A2_BOX, tol=tol)
        val = nll_centered(c_new, a2_new)
        moved = max(abs(c_new - c), abs(a2_new - a2))
        c, a2 = c_new, a2_new
        if moved <= tol or abs(best - val) <= 1e-12 * max(1.0, abs(val)):
            break
        best = val
    a1 = c - (b0 + np.exp(a2)) * Lc
    if not A1_BOX[0] <= a1 <= A1_BOX[1]:
        a1 = float(np.clip(a1, *A1_BOX))
        for _ in range(max_sweeps):
            a2_new = golden_section(lambda v: nll(a1, v), *A2_BOX, tol=tol)
            a1_new = golden_section(lambda v: nll(v, a2_new), *A1_BOX, tol=tol)
            moved = max(abs(a1_new - a1), abs(a2_new - a2))
            a1, a2 = a1_new, a2_new
            if moved <= tol:
                break
    return float(a1), float(a2)


def _zip_profile_lbfgs(L, pos, b0, tol, start):
    z = pos.astype(float)

    def fun(v):
        eta = v[0] + v[1] * L
        r = expit(eta) - z
        return np.sum(np.logaddexp(0.0, eta) - z * eta), np.array([r.sum(), r @ L])

    s_box = (b0 + np.exp(A2_BOX[0]), b0 + np.exp(A2_BOX[1]))
    if s_box[0] <= 0:
        s_box = (max(s_box[0], 1e-300), s_box[1])
    x0 = np.clip([start[0], b0 + np.exp(start[1])], [A1_BOX[0], s_box[0]], [A1_BOX[1], s_box[1]])
    res = scipy.optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                                  bounds=[A1_BOX, s_box],
                                  options={"ftol": 1e-15, "gtol": tol * 1e-3, "maxiter": 500})
    a1, s = res.x
    a2 = float(np.clip(np.log(s - b0), *A2_BOX)) if s > b0 else A2_BOX[0]
    return float(a1), a2


def zip_profile(mu_hat, y, b0=0.0, tol=1e-6, max_sweeps=200, start=(0.0, 0.0), method="lbfgs"):
    """Maximize the ZIP log-likelihood over ``(a1, a2)`` with ``mu_hat`` held fixed.

    The box is ``|a1| <= 20``, ``-10 <= a2 <= 5``. With ``mu_hat`` fixed the
    objective is a logistic likelihood in ``(a1, b0 + exp(a2))``, so the
    default solves that convex problem by bounded L-BFGS. ``method="golden"``
    runs coordinate descent with golden-section line searches instead.
    """
    mu_hat = np.asarray(mu_hat, float).ravel()
    y = np.asarray(y, float).ravel()
    if np.any(mu_hat <= 0):
        raise InputError("mu_hat must be positive")
    if method not in ("lbfgs", "golden"):
        raise InputError(f"unknown method {method!r}")
    L = np.log(mu_hat)
    pos = y > 0
    if not pos.any():
        warnings.warn("all responses are zero; ZIP probability is unidentified", RuntimeWarning,
                      stacklevel=2)
        return A1_BOX[0], A2_BOX[0]
    if method == "golden":
        return _zip_profile_golden(L, pos, b0, tol, max_sweeps, start)
    return _zip_profile_lbfgs(L, pos, b0, tol, start)


def zip_match_mean(mean, a1, a2, b0=0.0, tol=1e-12, max_iter=60):
    """Poisson parameter whose ZIP law with ``p = zip_prob(a1, a2, mu)`` has the given mean.

    The ZIP mean is increasing in ``mu`` when ``b0 + exp(a2) > 0``, so Newton
    steps on ``log mu`` converge from ``mu = mean``.
    """
    m = np.maximum(np.asarray(mean, float), MU_FLOOR)
    s = b0 + np.exp(a2)
    if s <= 0:
        raise InputError("mean matching needs a positive slope on log mu")
    target = np.log(m)
    u = target.copy()
    for _ in range(max_iter):
        mu = np.exp(u)
        lin = a1 + s * u
        log_p = log_expit(lin)
        tail = np.log(-np.expm1(-mu))
        f = log_p + u - tail - target
        ratio = np.where(mu > 1e-8, mu * np.exp(-mu) / -np.expm1(-np.maximum(mu, 1e-8)), 1.0 - mu / 2)
        slope = s * expit(-lin) + 1.0 - ratio
        step = f / np.maximum(slope, 1e-12)
        u = np.clip(u - np.clip(step, -5.0, 5.0), np.log(MU_FLOOR), 700.0)
        if np.max(np.abs(step)) <= tol * max(1.0, np.max(np.abs(u))):
            break
    return np.exp(u)


def sample_counts(family, mu, rng, zip_params=None, exposure=None, b0=0.0, match_mean=False):
    """Draw responses from the fitted law of ``family``.

    With ``match_mean`` a ZIP draw uses the Poisson parameter whose ZIP mean
    equals ``mu``, so that ``mu`` is read as the marginal mean.
    """
    mu = np.maximum(np.asarray(mu, float), MU_FLOOR)
    if family.kind == "zip":
        a1, a2 = zip_params
        if match_mean:
            mu = zip_match_mean(mu, a1, a2, b0)
        return zip_sample(mu, zip_prob(a1, a2, mu, b0), rng)
    if family.kind == "nb":
        k = np.asarray(exposure, float)
        return rng.negative_binomial(k, k / (k + mu))
    return rng.poisson(mu)


# --------------------------------------------------------- sklearn wrapper

class PenalizedGLM(RegressorMixin, BaseEstimator):
    """Log-link penalized GLM over a fixed column partition.

    Parameters
    ----------
    family : {'poisson', 'nb', 'zip', 'gaussian'}
    spatial : list of (start, stop) column ranges receiving the penalty
    penalty : reduced penalty matrix applied to every spatial block
    lambdas : tuple of smoothing parameters, one per spatial block
    lambda_grid : optional list of tuples; when given, GCV picks ``lambdas``
    """

    def __init__(self, family="poisson", spatial=(), penalty=None, lambdas=(0.0, 0.0),
                 lambda_grid=None, tol=1e-6, max_iter=100):
        self.family = family
        self.spatial = spatial
        self.penalty = penalty
        self.lambdas = lambdas
        self.lambda_grid = lambda_grid
        self.tol = tol
        self.max_iter = max_iter

    def _design(self, X):
        spatial = [slice(a, b) for a, b in self.spatial]
        covered = sum(s.stop - s.start for s in spatial)
        n_par = X.shape[1] - covered
        first = min((s.start for s in spatial), default=X.shape[1])
        if first != n_par:
            raise InputError("spatial blocks must be the trailing columns of X")
        return DesignBlock(X, [f"x{j}" for j in range(n_par)], [], spatial, np.zeros((len(X), 2)))

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        fam = Family(self.family)
        design = self._design(X)
        if self.lambda_grid is not None:
            lam, fit = gcv_select(design, y, fam, self.lambda_grid, penalty=self.penalty,
                                  return_fit=True)
        else:
            fit = pirls_fit(design, y, fam, *(tuple(self.lambdas) + (0.0, 0.0))[:2],
                            penalty=self.penalty, tol=self.tol, max_iter=self.max_iter)
        self.fit_ = fit
        self.coef_ = fit.coef
        self.lambdas_ = fit.lambdas
        self.n_features_in_ = X.shape[1]
        if fam.kind == "zip":
            self.zip_params_ = fit.zip_params if fit.zip_params is not None else zip_profile(fit.mu, y)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return Family(self.family).inverse(X @ self.coef_)
