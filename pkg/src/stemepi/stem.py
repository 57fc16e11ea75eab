"""Panels of regional counts and the moving-window STEM fits.

The infection model is

    log mu_is = b0(U_i) + b1(U_i) log(I_{i,s-1} + eps) + a0 Z_{i,s-1}
                + sum_j a_j A_{ij,s-lag} + sum_k g_k(X_ik)

and the death model replaces the mixing surface by a scalar on the active
count ``death_lag`` days earlier and drops the susceptible term. Both are
fitted on the window ``[t - t0, t]`` with GCV-selected smoothing.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from . import glm
from ._validation import InputError, check_points, frozen
from .bpst import OutsideDomainError, cached_basis, eval_basis
from .mesh import locate_all
from .unispline import DegenerateCovariateError, build_uni_basis


class PanelError(InputError):
    pass


class RegionOutsideDomainError(InputError):
    def __init__(self, region_ids):
        self.region_ids = list(region_ids)
        super().__init__(f"regions located outside the triangulation: {self.region_ids[:20]}")


class UnsupportedTriangleError(InputError):
    def __init__(self, triangles):
        self.triangles = list(map(int, triangles))
        super().__init__(f"triangles without any region location (no data support): {self.triangles[:20]}")


# ------------------------------------------------------------------- panel

@dataclass(frozen=True, eq=False)
class RegionPanel:
    """Daily counts per region with derived compartments.

    Arrays of daily counts have shape (n_regions, n_days). Cumulative
    compartments include day 0, so ``C[:, t] = new_cases[:, :t+1].sum(1)``.
    """

    region_ids: np.ndarray
    locations: np.ndarray
    population: np.ndarray
    covariates: np.ndarray
    new_cases: np.ndarray
    new_deaths: np.ndarray
    new_recovered: np.ndarray
    actions: np.ndarray
    dates: np.ndarray = None
    covariate_names: tuple = ()
    action_names: tuple = ()
    recovered_observed: bool = True

    def __post_init__(self):
        n = len(self.region_ids)
        loc = check_points(self.locations, "locations")
        pop = np.asarray(self.population, float).ravel()
        Y = np.asarray(self.new_cases, float)
        dD = np.asarray(self.new_deaths, float)
        dR = np.asarray(self.new_recovered, float)
        X = np.asarray(self.covariates, float).reshape(n, -1)
        A = np.asarray(self.actions, float)
        if A.ndim == 2:
            A = A[:, None, :] if A.shape == Y.shape else A.reshape(n, 0, Y.shape[1])
        if loc.shape[0] != n or pop.shape[0] != n or Y.shape[0] != n:
            raise PanelError("inconsistent number of regions across panel arrays")
        if dD.shape != Y.shape or dR.shape != Y.shape or A.shape[0] != n or A.shape[2] != Y.shape[1]:
            raise PanelError("daily series must share shape (n_regions, n_days)")
        if np.any(pop <= 0):
            raise PanelError(f"non-positive population for regions {list(np.asarray(self.region_ids)[pop <= 0])}")
        for name, arr in (("new_cases", Y), ("new_deaths", dD), ("new_recovered", dR)):
            if not np.all(np.isfinite(arr)):
                raise PanelError(f"{name} has missing values; impute before building the panel")
            if np.any(arr < 0):
                bad = np.unique(np.nonzero(arr < 0)[0])
                raise PanelError(f"negative {name} for regions {list(np.asarray(self.region_ids)[bad])}")
        C = np.cumsum(Y, axis=1)
        D = np.cumsum(dD, axis=1)
        R = np.cumsum(dR, axis=1)
        I = C - R - D
        S = pop[:, None] - C
        scale = np.maximum(1.0, C)
        if np.any(I < -1e-9 * scale):
            i, t = np.argwhere(I < -1e-9 * scale)[0]
            raise PanelError(f"negative active count for region {self.region_ids[i]} on day {t}")
        if np.any(S < 0):
            i, t = np.argwhere(S < 0)[0]
            raise PanelError(f"cumulative cases exceed population for region {self.region_ids[i]} on day {t}")
        with np.errstate(divide="ignore"):
            Z = np.log(S / pop[:, None])
        for name, arr in (("region_ids", np.asarray(self.region_ids)), ("locations", loc),
                          ("population", pop), ("covariates", X), ("new_cases", Y),
                          ("new_deaths", dD), ("new_recovered", dR), ("actions", A)):
            object.__setattr__(self, name, frozen(arr, arr.dtype))
        for name, arr in (("cum_cases", C), ("cum_deaths", D), ("cum_recovered", R),
                          ("active", np.maximum(I, 0.0)), ("susceptible", S), ("Z", Z)):
            object.__setattr__(self, name, frozen(arr))
        if self.dates is not None:
            object.__setattr__(self, "dates", frozen(np.asarray(self.dates, "datetime64[D]"), "datetime64[D]"))

    @property
    def n_regions(self):
        return len(self.region_ids)

    @property
    def n_days(self):
        return self.new_cases.shape[1]

    @property
    def p(self):
        return self.actions.shape[1]

    @property
    def q(self):
        return self.covariates.shape[1]

    def truncate(self, t):
        """Panel restricted to days ``0..t``."""
        s = slice(0, t + 1)
        return replace(self, new_cases=self.new_cases[:, s], new_deaths=self.new_deaths[:, s],
                       new_recovered=self.new_recovered[:, s], actions=self.actions[:, :, s],
                       dates=None if self.dates is None else self.dates[s])

    def with_counts(self, new_cases=None, new_deaths=None, new_recovered=None):
        return replace(self,
                       new_cases=self.new_cases if new_cases is None else new_cases,
                       new_deaths=self.new_deaths if new_deaths is None else new_deaths,
                       new_recovered=self.new_recovered if new_recovered is None else new_recovered)

    def subset(self, mask):
        mask = np.asarray(mask, bool)
        return replace(self, region_ids=self.region_ids[mask], locations=self.locations[mask],
                       population=self.population[mask], covariates=self.covariates[mask],
                       new_cases=self.new_cases[mask], new_deaths=self.new_deaths[mask],
                       new_recovered=self.new_recovered[mask], actions=self.actions[mask])


def impute_recoveries(new_cases, new_deaths, new_recovered, rate):
    """Fill missing daily recoveries with ``rate * I_{t-1}`` day by day."""
    Y, dD = np.asarray(new_cases, float), np.asarray(new_deaths, float)
    dR = np.array(new_recovered, float)
    I_prev = np.zeros(Y.shape[0])
    for t in range(Y.shape[1]):
        miss = ~np.isfinite(dR[:, t])
        dR[miss, t] = np.minimum(rate * I_prev[miss], np.maximum(I_prev[miss] + Y[miss, t] - dD[miss, t], 0))
        I_prev = I_prev + Y[:, t] - dD[:, t] - dR[:, t]
    return dR


def read_panel(panel_csv, regions_csv, actions_csv=None, recovery_rate=None):
    """Build a :class:`RegionPanel` from the CSV interchange files.

    Blank ``new_recovered`` entries are imputed with ``recovery_rate``; when
    no rate is given they are an error.
    """
    try:
        opts = dict(dtype={"region_id": str}, float_precision="round_trip")
        pdf = pd.read_csv(panel_csv, **opts)
        rdf = pd.read_csv(regions_csv, **opts)
        adf = pd.read_csv(actions_csv, **opts) if actions_csv else None
    except FileNotFoundError as exc:
        raise PanelError(f"input file not found: {exc.filename}") from exc
    need = ["region_id", "date", "new_cases", "new_deaths", "new_recovered"]
    missing = [c for c in need if c not in pdf.columns]
    if missing:
        raise PanelError(f"{panel_csv}: missing columns {missing}")
    for c in ("region_id", "u1", "u2", "population"):
        if c not in rdf.columns:
            raise PanelError(f"{regions_csv}: missing column {c}")
    if rdf["region_id"].duplicated().any():
        raise PanelError(f"{regions_csv}: duplicate region ids {rdf.loc[rdf['region_id'].duplicated(), 'region_id'].tolist()}")
    xcols = sorted([c for c in rdf.columns if c.startswith("x") and c[1:].isdigit()], key=lambda c: int(c[1:]))
    pdf["date"] = pd.to_datetime(pdf["date"])
    dates = np.sort(pdf["date"].unique())
    ids = rdf["region_id"].tolist()
    unknown = sorted(set(pdf["region_id"]) - set(ids))
    if unknown:
        raise PanelError(f"{panel_csv}: regions not in {regions_csv}: {unknown[:20]}")
    if pdf.duplicated(["region_id", "date"]).any():
        raise PanelError(f"{panel_csv}: duplicate (region_id, date) rows")

    def grid(df, col):
        wide = df.pivot(index="region_id", columns="date", values=col).reindex(index=ids, columns=dates)
        return wide.to_numpy(float)

    Y, dD, dR = grid(pdf, "new_cases"), grid(pdf, "new_deaths"), grid(pdf, "new_recovered")
    for name, arr in (("new_cases", Y), ("new_deaths", dD)):
        if np.isnan(arr).any():
            i, t = np.argwhere(np.isnan(arr))[0]
            raise PanelError(f"{panel_csv}: missing {name} for region {ids[i]} on {str(dates[t])[:10]}")
    observed = not np.isnan(dR).any()
    if not observed:
        if recovery_rate is None:
            raise PanelError(f"{panel_csv}: new_recovered has blanks and no recovery rate was supplied")
        dR = impute_recoveries(Y, dD, dR, recovery_rate)
    anames = ()
    if adf is not None:
        adf["date"] = pd.to_datetime(adf["date"])
        anames = tuple(sorted([c for c in adf.columns if c.startswith("a") and c[1:].isdigit()],
                              key=lambda c: int(c[1:])))
        A = np.stack([grid(adf, c) for c in anames], axis=1) if anames else np.zeros((len(ids), 0, len(dates)))
        if np.isnan(A).any():
            i, _, t = np.argwhere(np.isnan(A))[0]
            raise PanelError(f"{actions_csv}: missing action values for region {ids[i]} on {str(dates[t])[:10]}")
    else:
        A = np.zeros((len(ids), 0, len(dates)))
    return RegionPanel(np.array(ids), rdf[["u1", "u2"]].to_numpy(float), rdf["population"].to_numpy(float),
                       rdf[xcols].to_numpy(float) if xcols else np.zeros((len(ids), 0)),
                       Y, dD, dR, A, dates=dates.astype("datetime64[D]"),
                       covariate_names=tuple(xcols), action_names=anames, recovered_observed=observed)


def write_panel(panel, panel_csv, regions_csv, actions_csv=None, start_date="2020-03-15"):
    n, T = panel.new_cases.shape
    dates = panel.dates if panel.dates is not None else \
        np.datetime64(start_date, "D") + np.arange(T)
    ds = np.datetime_as_string(dates, unit="D")
    rid = np.repeat(panel.region_ids.astype(str), T)
    pd.DataFrame({"region_id": rid, "date": np.tile(ds, n),
                  "new_cases": panel.new_cases.ravel(), "new_deaths": panel.new_deaths.ravel(),
                  "new_recovered": panel.new_recovered.ravel()}).to_csv(panel_csv, index=False, float_format="%.17g")
    reg = pd.DataFrame({"region_id": panel.region_ids.astype(str), "u1": panel.locations[:, 0],
                        "u2": panel.locations[:, 1], "population": panel.population})
    for k in range(panel.q):
        reg[f"x{k + 1}"] = panel.covariates[:, k]
    reg.to_csv(regions_csv, index=False, float_format="%.17g")
    if actions_csv is not None:
        act = pd.DataFrame({"region_id": rid, "date": np.tile(ds, n)})
        for j in range(panel.p):
            act[f"a{j + 1}"] = panel.actions[:, j, :].ravel()
        act.to_csv(actions_csv, index=False, float_format="%.17g")


# ------------------------------------------------------------------ config

DEFAULT_LAMBDA_GRID = tuple((a, b) for a in (1e-2, 1.0, 1e2, 1e4) for b in (1e-2, 1.0, 1e2, 1e4))


@dataclass(frozen=True)
class StemConfig:
    """Settings shared by the infection, death and recovery fits.

    ``t0`` is the window length minus one: a fit at day ``t`` uses days
    ``t - t0 .. t``.
    """

    t0: int = 27
    death_lag: int = 14
    recovery_lag: int = 1
    action_lag: int = 7
    death_action_lag: int = 7
    infection_family: str = "poisson"
    death_family: str = "poisson"
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    degree: int = 2
    smoothness: int = 1
    spline_order: int = 4
    n_knots: int = 2
    infection_mesh: object = field(default=None, repr=False, compare=False)
    death_mesh: object = field(default=None, repr=False, compare=False)
    eps: float = 1.0
    recovery_prior: float = 0.10

    def __post_init__(self):
        for name in ("death_lag", "recovery_lag", "action_lag", "death_action_lag"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")
        if self.t0 < 1:
            raise InputError("t0 must be >= 1")

    @property
    def window(self):
        return self.t0 + 1

    def basis(self, submodel):
        mesh = self.infection_mesh if submodel == "infection" else (self.death_mesh or self.infection_mesh)
        if mesh is None:
            raise InputError("no mesh configured")
        return cached_basis(mesh, self.degree, self.smoothness)


# -------------------------------------------------------------------- fits

@dataclass
class StemFit:
    """A fitted infection or death model for one window."""

    submodel: str
    result: glm.FitResult
    basis: object = field(repr=False)
    unibases: list = field(repr=False)
    window: tuple
    family: glm.Family
    lag: int
    action_lag: int
    eps: float
    region_mask: np.ndarray = field(repr=False)
    basis_rows: np.ndarray = field(repr=False)
    phi_rows: np.ndarray = field(repr=False)
    design: object = field(default=None, repr=False)
    y: np.ndarray = field(default=None, repr=False)
    recovery_rate: float = None
    degenerate: bool = False
    dropped_regions: list = field(default_factory=list)
    covariate_index: list = field(default_factory=list)

    @property
    def coef(self):
        return self.result.coef

    @property
    def lambdas(self):
        return self.result.lambdas

    @property
    def zip_params(self):
        return self.result.zip_params

    @property
    def n_params(self):
        return 1 + self.action_dim

    @property
    def action_dim(self):
        return self.result.layout[0] - 1

    def with_coef(self, coef, zip_params=None):
        res = self.result.with_coef(coef)
        res.zip_params = zip_params if zip_params is not None else self.result.zip_params
        out = replace(self, result=res)
        return out

    def region_terms(self, coef=None):
        """Per-region static parts of the linear predictor.

        Returns ``(b0, b1, gamma_sum, lag_coef, action_coef)`` where ``b1`` is
        the mixing surface at each region (infection) or the scalar death
        coefficient broadcast to regions, and ``lag_coef`` is the coefficient
        of ``Z`` (infection) or zero (death).
        """
        coef = self.coef if coef is None else coef
        n_par, additive, spatial = self.result.layout
        b0 = self.basis_rows @ coef[spatial[0]]
        gam = np.zeros(len(b0))
        for sl, k in zip(additive, range(len(additive))):
            cols = slice(sl.start - additive[0].start, sl.stop - additive[0].start)
            gam += self.phi_rows[:, cols] @ coef[sl]
        if self.submodel == "infection":
            b1 = self.basis_rows @ coef[spatial[1]]
            return b0, b1, gam, coef[0], coef[1:n_par]
        return b0, np.full(len(b0), coef[0]), gam, 0.0, coef[1:n_par]

    def linear_predictor(self, lagged_active, z, actions, coef=None):
        """``eta`` for every retained region given lagged inputs.

        ``lagged_active`` is ``I_{s-1}`` (infection) or ``I_{s-lag}`` (death),
        ``z`` is ``Z_{s-1}`` and ``actions`` has shape (n, p).
        """
        if self.degenerate:
            return np.full(len(self.basis_rows), -np.inf)
        b0, b1, gam, a0, alpha = self.region_terms(coef)
        eta = b0 + b1 * np.log(np.asarray(lagged_active, float) + self.eps) + gam
        if self.submodel == "infection" and a0 != 0:
            eta = eta + a0 * np.asarray(z, float)
        if len(alpha):
            eta = eta + np.asarray(actions, float).reshape(len(b0), -1) @ alpha
        return eta

    def mean(self, lagged_active, z, actions, coef=None):
        with np.errstate(over="ignore"):
            return np.exp(self.linear_predictor(lagged_active, z, actions, coef))

    def expected(self, mu, zip_params=None):
        """Expected count given the Poisson parameter ``mu`` of the fitted law."""
        if self.family.kind != "zip":
            return mu
        return glm.zip_mean(np.maximum(mu, glm.MU_FLOOR), self.zip_probability(mu, zip_params))

    def zip_probability(self, mu, zip_params=None):
        a1, a2 = self.zip_params if zip_params is None else zip_params
        with np.errstate(divide="ignore"):
            return glm.zip_prob(a1, a2, np.maximum(mu, glm.MU_FLOOR))


def _region_checks(panel, basis):
    ids, _ = locate_all(basis.mesh, panel.locations)
    if np.any(ids < 0):
        raise RegionOutsideDomainError(panel.region_ids[ids < 0].tolist())
    empty = np.setdiff1d(np.arange(basis.mesh.M), ids)
    if empty.size:
        raise UnsupportedTriangleError(empty)


def _unibases(panel, mask, cfg):
    bases, keep = [], []
    for k in range(panel.q):
        try:
            bases.append(build_uni_basis(panel.covariates[mask, k], cfg.spline_order, cfg.n_knots, k=k))
            keep.append(k)
        except DegenerateCovariateError as exc:
            warnings.warn(str(exc), RuntimeWarning, stacklevel=3)
    return bases, keep


def assemble_design(panel, basis, unibases, t, t0, lag_r, submodel="infection", death_lag=14,
                    eps=1.0, region_mask=None, basis_rows=None, covariate_index=None):
    """Model matrix and response for the window ``[t - t0, t]``.

    Rows are ordered by day, then region. Returns ``(design, y)``.
    """
    if submodel not in ("infection", "death"):
        raise InputError(f"unknown submodel {submodel!r}")
    if t >= panel.n_days:
        raise InputError(f"day {t} is beyond the panel (last day {panel.n_days - 1})")
    first = t - t0
    need = max(1, lag_r) if submodel == "infection" else max(death_lag, lag_r, 1)
    if first - need < 0:
        raise InputError(f"window [{first}, {t}] needs data from day {first - need}, before the first day")
    mask = np.ones(panel.n_regions, bool) if region_mask is None else np.asarray(region_mask, bool)
    if basis_rows is None:
        try:
            basis_rows = eval_basis(basis, panel.locations[mask]) @ basis.nullspace
        except OutsideDomainError as exc:
            raise RegionOutsideDomainError(panel.region_ids[mask][exc.indices].tolist()) from None
    cov_idx = list(range(len(unibases))) if covariate_index is None else covariate_index
    phi = np.hstack([ub.transform(panel.covariates[mask, k]) for ub, k in zip(unibases, cov_idx)]) \
        if unibases else np.zeros((mask.sum(), 0))
    days = np.arange(first, t + 1)
    n, nd = int(mask.sum()), len(days)
    I = panel.active[mask]
    A = panel.actions[mask]
    lagged = I[:, days - (1 if submodel == "infection" else death_lag)]
    log_lag = np.log(lagged + eps).T.ravel()
    act = A[:, :, days - lag_r].transpose(2, 0, 1).reshape(n * nd, -1)
    Brep = np.tile(basis_rows, (nd, 1))
    Prep = np.tile(phi, (nd, 1))
    if submodel == "infection":
        first_col = panel.Z[mask][:, days - 1].T.ravel()
        names = ["Z"] + [f"A{j + 1}" for j in range(panel.p)]
        spatial_blocks = [Brep, Brep * log_lag[:, None]]
        y = panel.new_cases[mask][:, days].T.ravel()
    else:
        first_col = log_lag
        names = ["log_I_lag"] + [f"A{j + 1}" for j in range(panel.p)]
        spatial_blocks = [Brep]
        y = panel.new_deaths[mask][:, days].T.ravel()
    # an action constant over the window duplicates the intercept surface
    aliased = np.ptp(act, axis=0) == 0 if len(act) else np.zeros(act.shape[1], bool)
    act = np.where(aliased, 0.0, act)
    F = np.hstack([first_col[:, None], act, Prep] + spatial_blocks)
    off = 1 + act.shape[1]
    additive = []
    for ub in unibases:
        additive.append(slice(off, off + ub.J))
        off += ub.J
    spatial = []
    for blk in spatial_blocks:
        spatial.append(slice(off, off + blk.shape[1]))
        off += blk.shape[1]
    rows = np.column_stack([np.tile(np.flatnonzero(mask), nd), np.repeat(days, n)])
    exposure = I[:, days - 1].T.ravel() + eps
    fixed = np.zeros(F.shape[1], bool)
    fixed[1:1 + act.shape[1]] = aliased
    design = glm.DesignBlock(F, names, additive, spatial, rows, exposure=exposure, fixed=fixed)
    return design, y


def _fit_submodel(submodel, panel, t, cfg, lambdas=None, init=None, template=None):
    basis = cfg.basis(submodel)
    fam = glm.Family(cfg.infection_family if submodel == "infection" else cfg.death_family)
    lag = 1 if submodel == "infection" else cfg.death_lag
    action_lag = cfg.action_lag if submodel == "infection" else cfg.death_action_lag
    if template is not None:
        mask, unibases, cov_idx = template.region_mask, template.unibases, template.covariate_index
        basis_rows, dropped = template.basis_rows, template.dropped_regions
    else:
        mask = np.all(np.isfinite(panel.covariates), axis=1) if panel.q else np.ones(panel.n_regions, bool)
        dropped = panel.region_ids[~mask].tolist()
        if dropped:
            warnings.warn(f"dropping regions with missing covariates: {dropped[:20]}", RuntimeWarning,
                          stacklevel=3)
        _region_checks(panel.subset(mask), basis)
        unibases, cov_idx = _unibases(panel, mask, cfg)
        basis_rows = eval_basis(basis, panel.locations[mask]) @ basis.nullspace
    design, y = assemble_design(panel, basis, unibases, t, cfg.t0, action_lag, submodel, cfg.death_lag,
                                cfg.eps, mask, basis_rows, cov_idx)
    common = dict(submodel=submodel, basis=basis, unibases=unibases, window=(t - cfg.t0, t),
                  family=fam, lag=lag, action_lag=action_lag, eps=cfg.eps, region_mask=mask,
                  basis_rows=basis_rows, phi_rows=design.F[:mask.sum(), design.additive[0].start:
                                                           design.additive[-1].stop]
                  if design.additive else np.zeros((mask.sum(), 0)),
                  design=design, y=y, dropped_regions=dropped, covariate_index=cov_idx)
    if y.sum() == 0:
        res = glm.FitResult(coef=np.zeros(design.width), alpha=np.zeros(design.n_params), xi=[],
                            theta_star=[], lambdas=(0.0,) * len(design.spatial), mu=np.zeros(len(y)),
                            eta=np.full(len(y), -np.inf), deviance=0.0, pearson=0.0, edf=0.0,
                            iterations=0, converged=True, layout=glm._layout(design))
        return StemFit(result=res, degenerate=True, **common)
    K = _reduced_penalty_cache(basis)
    fit_fam = fam
    if fam.kind == "zip" and template is not None and template.zip_params is not None:
        fit_fam = glm.Family("zip", tuple(template.zip_params))
    if lambdas is None:
        grid = cfg.lambda_grid if submodel == "infection" else sorted({(g[0], 0.0) for g in cfg.lambda_grid})
        _, res = glm.gcv_select(design, y, fit_fam, grid, penalty=K, return_fit=True)
    else:
        lam = tuple(lambdas) + (0.0, 0.0)
        res = glm.pirls_fit(design, y, fit_fam, lam[0], lam[1], penalty=K, init=init)
    return StemFit(result=res, **common)


_K_CACHE = {}


def _reduced_penalty_cache(basis):
    key = (basis.mesh.digest, basis.d, basis.r_s)
    if key not in _K_CACHE:
        _K_CACHE[key] = basis.reduced_penalty()
    return _K_CACHE[key]


def fit_infection(panel, t, cfg, lambdas=None, init=None, template=None):
    """Fit the infection model on the window ending at day ``t``.

    ``lambdas`` skips GCV; ``template`` reuses bases and region masks of an
    earlier fit (used by the bootstrap).
    """
    return _fit_submodel("infection", panel, t, cfg, lambdas, init, template)


def fit_death(panel, t, cfg, lambdas=None, init=None, template=None):
    """Fit the death model (scalar coefficient on ``log I`` lagged ``death_lag`` days)."""
    return _fit_submodel("death", panel, t, cfg, lambdas, init, template)


def estimate_recovery_rate(panel, t, cfg):
    """Least-squares recovery rate through the origin, clamped to [0, 1]."""
    if not panel.recovered_observed:
        return float(cfg.recovery_prior)
    days = np.arange(t - cfg.t0, t + 1)
    if days[0] - cfg.recovery_lag < 0:
        raise InputError("recovery window extends before the first day")
    I = panel.active[:, days - cfg.recovery_lag].ravel()
    dR = panel.new_recovered[:, days].ravel()
    denom = I @ I
    if denom == 0:
        raise InputError("all active counts are zero in the recovery window")
    return float(np.clip((I @ dR) / denom, 0.0, 1.0))


def eval_surfaces(fit, points):
    """Estimated intercept and mixing surfaces at ``points``.

    For the death model the second return value is the scalar coefficient
    repeated at every point.
    """
    B = eval_basis(fit.basis, points) @ fit.basis.nullspace
    spatial = fit.result.layout[2]
    b0 = B @ fit.coef[spatial[0]]
    if fit.submodel == "infection":
        return b0, B @ fit.coef[spatial[1]]
    return b0, np.full(len(b0), fit.coef[0])


def eval_curves(fit, k, x):
    """Estimated additive component for covariate ``k`` on ``x`` (clamped to its range)."""
    if k not in fit.covariate_index:
        raise InputError(f"covariate {k} is not in the fitted model")
    j = fit.covariate_index.index(k)
    return fit.unibases[j].transform(x) @ fit.coef[fit.result.layout[1][j]]


class STEM(BaseEstimator):
    """Moving-window spatiotemporal epidemic model.

    ``fit`` estimates the infection, death and recovery models on the window
    ending at day ``t``; ``predict`` runs the compartmental forecast.

    Parameters
    ----------
    mesh : TriangleMesh for the spatial surfaces
    t0 : window length minus one
    family, death_family : 'poisson', 'nb' or 'zip'
    lambda_grid : candidate (lambda0, lambda1) pairs for GCV
    """

    def __init__(self, mesh=None, t0=27, death_lag=14, action_lag=7, death_action_lag=7,
                 family="poisson", death_family=None, lambda_grid=DEFAULT_LAMBDA_GRID, degree=2,
                 smoothness=1, spline_order=4, n_knots=2, death_mesh=None, recovery_prior=0.10):
        self.mesh = mesh
        self.t0 = t0
        self.death_lag = death_lag
        self.action_lag = action_lag
        self.death_action_lag = death_action_lag
        self.family = family
        self.death_family = death_family
        self.lambda_grid = lambda_grid
        self.degree = degree
        self.smoothness = smoothness
        self.spline_order = spline_order
        self.n_knots = n_knots
        self.death_mesh = death_mesh
        self.recovery_prior = recovery_prior

    def make_config(self):
        if self.mesh is None:
            raise InputError("STEM needs a mesh")
        return StemConfig(t0=self.t0, death_lag=self.death_lag, action_lag=self.action_lag,
                          death_action_lag=self.death_action_lag, infection_family=self.family,
                          death_family=self.death_family or self.family,
                          lambda_grid=tuple(map(tuple, self.lambda_grid)), degree=self.degree,
                          smoothness=self.smoothness, spline_order=self.spline_order,
                          n_knots=self.n_knots, infection_mesh=self.mesh,
                          death_mesh=self.death_mesh or self.mesh, recovery_prior=self.recovery_prior)

    def fit(self, panel, t=None):
        if not isinstance(panel, RegionPanel):
            raise InputError("fit expects a RegionPanel")
        t = panel.n_days - 1 if t is None else int(t)
        cfg = self.make_config()
        past = panel.truncate(t)
        self.config_ = cfg
        self.t_ = t
        self.infection_ = fit_infection(past, t, cfg)
        self.death_ = fit_death(past, t, cfg)
        self.recovery_rate_ = estimate_recovery_rate(past, t, cfg)
        self.panel_ = past
        return self

    def predict(self, H=14, scenario=None):
        """Point forecast for days ``t+1 .. t+H`` as a ForecastPath."""
        from sklearn.utils.validation import check_is_fitted
        from .forecast import predict_path
        check_is_fitted(self, "infection_")
        return predict_path(self.infection_, self.death_, self.recovery_rate_, self.panel_, self.t_, H,
                            scenario=scenario)

    def surfaces(self, points):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "infection_")
        return {"infection": eval_surfaces(self.infection_, points),
                "death": eval_surfaces(self.death_, points) if not self.death_.degenerate else None}
