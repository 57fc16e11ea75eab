"""Multi-step forecasts, bootstrap bias correction and envelope bands.

Forecasts alternate the infection, death and recovery models one day at a
time. Compartment arithmetic is carried out on a dyadic grid (``2**-20`` by
default, or whole counts) so that ``S + C == N`` and ``I == C - R - D`` hold
exactly in floating point.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import glm
from ._validation import InputError, check_rng
from .stem import estimate_recovery_rate, fit_death, fit_infection

RESOLUTION = 2.0 ** -20


class BandError(InputError):
    pass


def quantize(x, resolution=RESOLUTION):
    return np.round(np.asarray(x, float) / resolution) * resolution


@dataclass
class ForecastPath:
    """Predicted daily flows and compartments for days ``t+1 .. t+H``.

    Every array has shape (n_regions, H). ``mu`` holds the unquantized
    infection means, ``saturated`` marks steps where cases were capped at
    the susceptible count.
    """

    t: int
    region_ids: np.ndarray
    population: np.ndarray
    yhat: np.ndarray
    dhat: np.ndarray
    rhat: np.ndarray
    C: np.ndarray
    I: np.ndarray
    R: np.ndarray
    D: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    mu_death: np.ndarray
    saturated: np.ndarray
    dates: np.ndarray = None

    @property
    def H(self):
        return self.yhat.shape[1]


@dataclass
class PredictionBand:
    """Envelope of retained bootstrap paths, per region and step."""

    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    B: int
    distance: str
    deleted: np.ndarray = field(repr=False)
    target: str = "cases"

    @property
    def level(self):
        return 1.0 - self.alpha

    @property
    def n_deleted(self):
        return self.deleted.shape[1]

    @property
    def retained(self):
        return self.B - self.n_deleted


@dataclass
class BootstrapResult:
    """Base fits, bias-corrected fits and replicate coefficients."""

    base_infection: object
    base_death: object
    corrected_infection: object
    corrected_death: object
    replicate_infection: np.ndarray = field(repr=False)
    replicate_death: np.ndarray = field(repr=False)
    replicate_zip_infection: np.ndarray = field(repr=False)
    replicate_zip_death: np.ndarray = field(repr=False)
    recovery_rate: float = 0.0
    t: int = 0
    n_failed: int = 0
    seed: object = None

    @property
    def B(self):
        return len(self.replicate_infection)


def _actions_at(panel, mask, s, t, scenario):
    """Actions on day ``s``: observed up to ``t``, then scenario or last value carried forward."""
    if s <= t:
        return panel.actions[mask][:, :, s]
    if scenario is not None:
        return np.asarray(scenario, float)[mask][:, :, min(s - t - 1, scenario.shape[2] - 1)]
    return panel.actions[mask][:, :, t]


def predict_path(inf_fit, death_fit, nu, panel, t, H, scenario=None, coef_infection=None,
                 coef_death=None, zip_infection=None, zip_death=None, rng=None,
                 resolution=RESOLUTION):
    """Forecast ``H`` days beyond day ``t``.

    With ``rng`` the daily flows are drawn from the fitted count laws
    instead of set to their means. Coefficient overrides let the bootstrap
    reuse one set of fitted bases.

    Parameters
    ----------
    inf_fit, death_fit : StemFit
    nu : recovery rate
    panel : RegionPanel covering at least days ``0..t``
    t : forecast origin
    H : horizon
    scenario : optional actions of shape (n_regions, p, H) for days ``t+1..t+H``
    """
    if H < 1:
        raise InputError("horizon must be >= 1")
    if t >= panel.n_days:
        raise InputError(f"origin {t} is beyond the panel")
    if resolution <= 0:
        raise InputError("resolution must be positive")
    mask = inf_fit.region_mask
    if death_fit is not None and not np.array_equal(death_fit.region_mask, mask):
        raise InputError("infection and death fits cover different regions")
    N = panel.population[mask]
    n = len(N)
    lag = death_fit.lag if death_fit is not None else 0
    I_obs = panel.active[mask]
    C = quantize(panel.cum_cases[mask, t], resolution)
    D = quantize(panel.cum_deaths[mask, t], resolution)
    R = quantize(panel.cum_recovered[mask, t], resolution)
    I = C - R - D
    S = N - C
    zi = zip_infection if zip_infection is not None else inf_fit.zip_params
    zd = None if death_fit is None else (zip_death if zip_death is not None else death_fit.zip_params)
    out = {k: np.zeros((n, H)) for k in ("yhat", "dhat", "rhat", "C", "I", "R", "D", "S", "Z", "mu",
                                         "mu_death")}
    saturated = np.zeros((n, H), bool)
    hist_I = {}
    for h in range(1, H + 1):
        s = t + h
        with np.errstate(divide="ignore"):
            Z = np.log(S / N)
        mu = inf_fit.mean(I, Z, _actions_at(panel, mask, s - inf_fit.action_lag, t, scenario),
                          coef=coef_infection)
        if rng is None:
            y = inf_fit.expected(mu, zi)
        else:
            y = glm.sample_counts(inf_fit.family, np.minimum(mu, S + 1.0), rng, zip_params=zi,
                                  exposure=I + inf_fit.eps)
        y = quantize(y, resolution)
        over = y > S
        saturated[:, h - 1] = over
        y = np.where(over, S, y)
        rec = quantize(nu * I, resolution)
        if death_fit is None or death_fit.degenerate:
            mu_d = np.zeros(n)
            d = np.zeros(n)
        else:
            i_lag = I_obs[:, s - lag] if s - lag <= t else hist_I[s - lag]
            mu_d = death_fit.mean(i_lag, None, _actions_at(panel, mask, s - death_fit.action_lag, t, scenario),
                                  coef=coef_death)
            if rng is None:
                d = death_fit.expected(mu_d, zd)
            else:
                d = glm.sample_counts(death_fit.family, mu_d, rng, zip_params=zd, exposure=I + death_fit.eps)
            d = quantize(d, resolution)
        d = np.minimum(d, np.maximum(I + y - rec, 0.0))
        C = C + y
        R = R + rec
        D = D + d
        I = C - R - D
        S = N - C
        hist_I[s] = I
        with np.errstate(divide="ignore"):
            Z = np.log(S / N)
        for key, val in (("yhat", y), ("dhat", d), ("rhat", rec), ("C", C), ("I", I), ("R", R),
                         ("D", D), ("S", S), ("Z", Z), ("mu", mu), ("mu_death", mu_d)):
            out[key][:, h - 1] = val
    if saturated.any():
        warnings.warn(f"predicted cases capped at the susceptible count in {int(saturated.sum())} "
                      "region-days", RuntimeWarning, stacklevel=2)
    dates = None
    if panel.dates is not None:
        dates = panel.dates[t] + np.arange(1, H + 1)
    return ForecastPath(t=t, region_ids=panel.region_ids[mask], population=N, saturated=saturated,
                        dates=dates, **out)


# -------------------------------------------------------------- bootstrap

def _replicate_panel(panel, inf, death, nu, t, t0, rng):
    """Regenerate the window ``[t - t0, t]`` from the fitted count laws.

    Compartments start from the observed state the day before the window.
    """
    mask = inf.region_mask
    first = t - t0
    Y = panel.new_cases.copy()
    dD = panel.new_deaths.copy()
    dR = panel.new_recovered.copy()
    N = panel.population[mask]
    I_obs = panel.active[mask]
    I = I_obs[:, first - 1].copy()
    S = panel.susceptible[mask, first - 1].copy()
    hist = {}
    for s in range(first, t + 1):
        Z = np.log(S / N)
        mu = inf.mean(I, Z, panel.actions[mask][:, :, s - inf.action_lag])
        y = np.minimum(glm.sample_counts(inf.family, np.minimum(mu, S + 1.0), rng, zip_params=inf.zip_params,
                                         exposure=I + inf.eps), S)
        rec = nu * I
        if death.degenerate:
            d = np.zeros(len(N))
        else:
            i_lag = I_obs[:, s - death.lag] if s - death.lag < first else hist[s - death.lag]
            mu_d = death.mean(i_lag, None, panel.actions[mask][:, :, s - death.action_lag])
            d = glm.sample_counts(death.family, mu_d, rng, zip_params=death.zip_params,
                                  exposure=I + death.eps)
        d = np.minimum(d, np.maximum(I + y - rec, 0.0))
        Y[mask, s], dD[mask, s], dR[mask, s] = y, d, rec
        I = np.maximum(I + y - rec - d, 0.0)
        S = S - y
        hist[s] = I
    return panel.with_counts(Y, dD, dR)


def bootstrap_bias_correct(panel, t, cfg, B, seed=None, inf_fit=None, death_fit=None, nu=None,
                           max_fail=0.1):
    """Bias-correct the window fits by refitting ``B`` simulated replicates.

    The corrected coefficient vector is ``2 * base - mean(replicates)``.
    Replicates reuse the base smoothing parameters and start from the base
    coefficients.
    """
    if B < 1:
        raise InputError("B must be >= 1")
    rng = check_rng(seed)
    panel = panel.truncate(t)
    if inf_fit is None:
        inf_fit = fit_infection(panel, t, cfg)
    if death_fit is None:
        death_fit = fit_death(panel, t, cfg)
    if nu is None:
        nu = estimate_recovery_rate(panel, t, cfg)
    reps_i, reps_d, zips_i, zips_d = [], [], [], []
    failed = 0
    for _ in range(B):
        rp = _replicate_panel(panel, inf_fit, death_fit, nu, t, cfg.t0, rng)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fi = fit_infection(rp, t, cfg, lambdas=inf_fit.lambdas, init=inf_fit.coef, template=inf_fit)
                fd = death_fit if death_fit.degenerate else \
                    fit_death(rp, t, cfg, lambdas=death_fit.lambdas, init=death_fit.coef, template=death_fit)
        except (glm.SolverError, InputError):
            failed += 1
            continue
        if fd.degenerate:
            fd = death_fit
        reps_i.append(fi.coef)
        reps_d.append(fd.coef)
        zips_i.append(fi.zip_params if fi.zip_params is not None else (np.nan, np.nan))
        zips_d.append(fd.zip_params if fd.zip_params is not None else (np.nan, np.nan))
    if failed > max_fail * B:
        raise glm.SolverError(f"{failed} of {B} bootstrap refits failed")
    if failed:
        warnings.warn(f"dropped {failed} failed bootstrap refits", RuntimeWarning, stacklevel=2)
    Ri, Rd = np.array(reps_i), np.array(reps_d)
    corr_i = inf_fit.with_coef(2 * inf_fit.coef - Ri.mean(axis=0))
    corr_d = death_fit if death_fit.degenerate else death_fit.with_coef(2 * death_fit.coef - Rd.mean(axis=0))
    return BootstrapResult(inf_fit, death_fit, corr_i, corr_d, Ri, Rd, np.array(zips_i, float),
                           np.array(zips_d, float), float(nu), t, failed, seed)


def _reflect_zip(base, rep):
    if base is None or rep is None or np.any(np.isnan(rep)):
        return base
    a = 2 * np.asarray(base, float) - np.asarray(rep, float)
    return (float(np.clip(a[0], *glm.A1_BOX)), float(np.clip(a[1], *glm.A2_BOX)))


def bootstrap_paths(boot, panel, H, seed=None, scenario=None):
    """Sampled forecast paths under reflected coefficients.

    Returns ``(cases, deaths)``, each of shape (B, n_regions, H).
    """
    rng = check_rng(seed)
    bi, bd = boot.base_infection, boot.base_death
    ys, ds = [], []
    for b in range(boot.B):
        ci = 2 * bi.coef - boot.replicate_infection[b]
        cd = None if bd.degenerate else 2 * bd.coef - boot.replicate_death[b]
        zi = _reflect_zip(bi.zip_params, boot.replicate_zip_infection[b])
        zd = None if bd.degenerate else _reflect_zip(bd.zip_params, boot.replicate_zip_death[b])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p = predict_path(bi, bd, boot.recovery_rate, panel, boot.t, H, scenario=scenario,
                             coef_infection=ci, coef_death=cd, zip_infection=zi, zip_death=zd, rng=rng)
        ys.append(p.yhat)
        ds.append(p.dhat)
    return np.array(ys), np.array(ds)


def _distance(paths, center, kind):
    diff = paths - center[None, :]
    return np.sum(diff ** 2, axis=1) if kind == "squared" else np.sum(np.abs(diff), axis=1)


def delete_extreme_paths(paths, center, kappa, distance="squared"):
    """Sequentially drop the most distant of the current extreme paths.

    ``paths`` has shape (B, H). At each round the candidates are the paths
    attaining the pointwise maximum or minimum at some step; the one
    farthest from ``center`` is removed (lowest index on ties). Returns the
    deleted indices in order.
    """
    if distance not in ("squared", "absolute"):
        raise InputError(f"unknown distance {distance!r}")
    paths = np.asarray(paths, float)
    alive = np.ones(len(paths), bool)
    dist = _distance(paths, np.asarray(center, float), distance)
    deleted = []
    for _ in range(kappa):
        idx = np.flatnonzero(alive)
        sub = paths[idx]
        cand = np.unique(np.r_[idx[np.argmax(sub, axis=0)], idx[np.argmin(sub, axis=0)]])
        j = cand[np.argmax(dist[cand])]
        alive[j] = False
        deleted.append(int(j))
    return np.array(deleted, int)


def n_deleted(alpha, B):
    return int(np.floor(alpha * B + 1e-9))


def envelope_band(paths, center, alpha, distance="squared", target="cases"):
    """Per-region envelope band from paths of shape (B, n_regions, H)."""
    paths = np.asarray(paths, float)
    if not 0.0 <= alpha < 1.0:
        raise BandError("alpha must lie in [0, 1)")
    B = paths.shape[0]
    kappa = n_deleted(alpha, B)
    if alpha > 0 and kappa < 1:
        warnings.warn(f"alpha * B = {alpha * B:g} < 1: no paths deleted", RuntimeWarning, stacklevel=2)
    if B - kappa < 2:
        raise BandError(f"only {B - kappa} paths would survive; increase B")
    n, H = paths.shape[1], paths.shape[2]
    lower, upper = np.empty((n, H)), np.empty((n, H))
    deleted = np.empty((n, kappa), int)
    for i in range(n):
        gone = delete_extreme_paths(paths[:, i, :], center[i], kappa, distance)
        keep = np.setdiff1d(np.arange(B), gone)
        lower[i] = paths[keep, i, :].min(axis=0)
        upper[i] = paths[keep, i, :].max(axis=0)
        deleted[i] = gone
    return PredictionBand(lower, upper, float(alpha), B, distance, deleted, target)


def prediction_band(boot, panel, H, alpha=0.05, distance="squared", seed=None, scenario=None,
                    target="cases", paths=None):
    """Envelope band around the bias-corrected mean path.

    ``target`` is ``"cases"`` or ``"deaths"``; pass ``paths`` from
    :func:`bootstrap_paths` to band both targets from one set of draws.
    """
    if distance not in ("squared", "absolute"):
        raise BandError(f"unknown distance {distance!r}")
    if target not in ("cases", "deaths"):
        raise BandError(f"unknown target {target!r}")
    if paths is None:
        paths = bootstrap_paths(boot, panel, H, seed, scenario)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        center = predict_path(boot.corrected_infection, boot.corrected_death, boot.recovery_rate, panel,
                              boot.t, H, scenario=scenario)
    ys, ds = paths
    chosen, mid = (ys, center.yhat) if target == "cases" else (ds, center.dhat)
    return envelope_band(chosen, mid, alpha, distance, target)
