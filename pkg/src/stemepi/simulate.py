"""Synthetic epidemics with known coefficient surfaces, and simple baselines.

Truth is closed-form: surfaces are affine-plus-bump functions of the
location, and the additive curves are centered under the uniform covariate
law. A design serializes to JSON so a benchmark can be rerun exactly.
"""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import glm
from ._validation import InputError
from .mesh import grid_mesh, locate_all
from .stem import RegionPanel


# ------------------------------------------------------------------ truth

@dataclass(frozen=True)
class Surface:
    """``const + slope . (u - 0.5) + bump * sin(pi u1) sin(pi u2) + wave * cos(pi u1) cos(pi u2)``."""

    const: float = 0.0
    slope: tuple = (0.0, 0.0)
    bump: float = 0.0
    wave: float = 0.0

    def __call__(self, u):
        u = np.atleast_2d(np.asarray(u, float))
        v = u - 0.5
        return (self.const + v @ np.asarray(self.slope, float)
                + self.bump * np.sin(np.pi * u[:, 0]) * np.sin(np.pi * u[:, 1])
                + self.wave * np.cos(np.pi * u[:, 0]) * np.cos(np.pi * u[:, 1]))


# each curve integrates to zero over [0, 1]
CURVES = (
    lambda x: np.sin(2 * np.pi * x),
    lambda x: x - 0.5,
    lambda x: np.cos(np.pi * x),
    lambda x: x ** 2 - 1.0 / 3.0,
    lambda x: np.exp(x) - (np.e - 1.0),
)


def true_curve(k, scale, x):
    return scale * CURVES[k](np.asarray(x, float))


@dataclass
class SimDesign:
    """Everything needed to regenerate a synthetic panel.

    ``family`` is ``"zip"``, ``"poisson"`` (no zero inflation) or ``"none"``
    (counts equal their means; used to check exact recovery).
    """

    n_regions: int = 100
    n_days: int = 60
    seed: int = 0
    layout_seed: int = 0
    start_date: str = "2020-03-15"
    mesh_n: int = 4
    jitter: float = 0.25
    population: tuple = (5e4, 5e5)
    seed_fraction: float = 0.5
    initial_cases: float = 20.0
    family: str = "zip"
    death_family: str = None
    beta0_inf: Surface = field(default_factory=lambda: Surface(-1.6, (0.2, -0.1), 0.4))
    beta1_inf: Surface = field(default_factory=lambda: Surface(1.0, (0.0, 0.0), 0.0, 0.05))
    alpha0_inf: float = 1.0
    alpha_inf: tuple = (-0.25, -0.35)
    gamma_inf: tuple = (0.15, 0.2, 0.1, 0.3, 0.1)
    beta0_death: Surface = field(default_factory=lambda: Surface(-3.5, (0.3, 0.0), 0.0, 0.2))
    beta1_death: float = 1.0
    alpha_death: tuple = (0.0, 0.0)
    gamma_death: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    zip_inf: tuple = (2.0, -1.0)
    zip_death: tuple = (2.0, -1.0)
    recovery_rate: float = 0.07
    recovery_noise: float = 0.0
    action_lag: int = 7
    death_action_lag: int = 7
    death_lag: int = 14
    action_window: tuple = (14, 24)
    eta_cap: float = 20.0

    def __post_init__(self):
        for name in ("beta0_inf", "beta1_inf", "beta0_death"):
            v = getattr(self, name)
            if isinstance(v, dict):
                v = Surface(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
                setattr(self, name, v)
        for name in ("population", "alpha_inf", "gamma_inf", "alpha_death", "gamma_death",
                     "zip_inf", "zip_death", "action_window"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 0.0 <= self.recovery_rate <= 1.0:
            raise InputError("recovery_rate must lie in [0, 1]")
        if self.family not in ("zip", "poisson", "none"):
            raise InputError(f"unknown simulation family {self.family!r}")
        if self.death_family is None:
            self.death_family = self.family
        if len(self.alpha_inf) != len(self.alpha_death):
            raise InputError("infection and death action coefficients must have equal length")
        if len(self.gamma_inf) != len(self.gamma_death) or len(self.gamma_inf) > len(CURVES):
            raise InputError(f"at most {len(CURVES)} covariates, equal for both models")
        if self.n_days <= self.death_lag:
            raise InputError("n_days must exceed death_lag")

    @property
    def p(self):
        return len(self.alpha_inf)

    @property
    def q(self):
        return len(self.gamma_inf)

    def mesh(self):
        return grid_mesh(self.mesh_n, self.mesh_n)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def region_layout(design):
    """Locations, populations, covariates and action schedules (fixed by ``layout_seed``)."""
    rng = np.random.default_rng(design.layout_seed)
    n = design.n_regions
    m = int(round(np.sqrt(n)))
    if m * m == n:
        g = (np.arange(m) + 0.5) / m
        base = np.column_stack([np.tile(g, m), np.repeat(g, m)])
        loc = base + rng.uniform(-design.jitter, design.jitter, (n, 2)) / m
    else:
        loc = rng.uniform(0.02, 0.98, (n, 2))
    loc = np.clip(loc, 1e-6, 1 - 1e-6)
    lo, hi = design.population
    pop = np.round(np.exp(rng.uniform(np.log(lo), np.log(hi), n)))
    X = rng.uniform(0.0, 1.0, (n, design.q))
    T = design.n_days
    days = np.arange(T)
    A = np.zeros((n, design.p, T))
    a0, a1 = design.action_window
    if design.p >= 1:
        start = rng.integers(a0, a1 + 1, n)
        A[:, 0, :] = days[None, :] >= start[:, None]
    if design.p >= 2:
        start = rng.integers(a0 - 4, a1 - 2, n)
        depth = rng.uniform(0.5, 1.0, n)
        A[:, 1, :] = np.clip((days[None, :] - start[:, None]) / 10.0, 0.0, 1.0) * depth[:, None]
    for j in range(2, design.p):
        A[:, j, :] = rng.uniform(0, 1, n)[:, None] * (days[None, :] >= a0)
    seeded = rng.random(n) < design.seed_fraction
    if not seeded.any():
        seeded[0] = True
    return loc, pop, X, A, seeded


def true_region_terms(design, loc, X):
    """Per-region truth: ``(b0_inf, b1_inf, gamma_inf_sum, b0_death, gamma_death_sum)``."""
    gi = sum((true_curve(k, s, X[:, k]) for k, s in enumerate(design.gamma_inf)), np.zeros(len(loc)))
    gd = sum((true_curve(k, s, X[:, k]) for k, s in enumerate(design.gamma_death)), np.zeros(len(loc)))
    return design.beta0_inf(loc), design.beta1_inf(loc), gi, design.beta0_death(loc), gd


def _draw(kind, mu, zip_params, rng):
    if kind == "none":
        return mu.copy()
    if kind == "poisson":
        return rng.poisson(mu).astype(float)
    p = glm.zip_prob(zip_params[0], zip_params[1], np.maximum(mu, glm.MU_FLOOR))
    return glm.zip_sample(mu, p, rng).astype(float)


def simulate_panel(design, return_truth=False):
    """Run the discrete-time epidemic forward and return a :class:`RegionPanel`.

    Day 0 carries the initial cases of the seeded regions. Recoveries are
    ``recovery_rate * I_{t-1}`` (plus optional Gaussian noise, rounded and
    clipped); deaths are drawn from zero on day ``death_lag``.
    """
    rng = np.random.default_rng(design.seed)
    loc, pop, X, A, seeded = region_layout(design)
    n, T = design.n_regions, design.n_days
    b0, b1, gi, d0, gd = true_region_terms(design, loc, X)
    ai, ad = np.asarray(design.alpha_inf, float), np.asarray(design.alpha_death, float)
    Y = np.zeros((n, T))
    dD = np.zeros((n, T))
    dR = np.zeros((n, T))
    Y[:, 0] = np.where(seeded, design.initial_cases, 0.0)
    I = Y[:, 0].copy()
    active = np.zeros((n, T))
    active[:, 0] = I
    S = pop - Y[:, 0]
    capped = False
    for s in range(1, T):
        eta = b0 + b1 * np.log(I + 1.0) + gi + A[:, :, max(s - design.action_lag, 0)] @ ai
        if design.alpha0_inf != 0:
            with np.errstate(divide="ignore"):
                eta = eta + design.alpha0_inf * np.log(S / pop)
        if np.any(eta > design.eta_cap):
            capped = True
        mu = np.exp(np.minimum(eta, design.eta_cap))
        y = np.minimum(_draw(design.family, mu, design.zip_inf, rng), S)
        rec = design.recovery_rate * I
        if design.recovery_noise > 0:
            rec = np.clip(np.round(rec + rng.normal(0, design.recovery_noise, n)), 0, I)
        d = np.zeros(n)
        if s >= design.death_lag:
            eta_d = d0 + design.beta1_death * np.log(active[:, s - design.death_lag] + 1.0) + gd \
                + A[:, :, max(s - design.death_action_lag, 0)] @ ad
            capped |= bool(np.any(eta_d > design.eta_cap))
            mu_d = np.exp(np.minimum(eta_d, design.eta_cap))
            d = _draw(design.death_family, mu_d, design.zip_death, rng)
        d = np.minimum(d, np.maximum(I + y - rec, 0.0))
        Y[:, s], dD[:, s], dR[:, s] = y, d, rec
        I = np.maximum(I + y - rec - d, 0.0)
        S = S - y
        active[:, s] = I
    if capped:
        warnings.warn(f"linear predictor capped at {design.eta_cap}", RuntimeWarning, stacklevel=2)
    dates = np.datetime64(design.start_date, "D") + np.arange(T)
    panel = RegionPanel(np.array([f"R{i:04d}" for i in range(n)]), loc, pop, X, Y, dD, dR, A,
                        dates=dates, covariate_names=tuple(f"x{k + 1}" for k in range(design.q)),
                        action_names=tuple(f"a{j + 1}" for j in range(design.p)))
    if return_truth:
        return panel, {"b0_inf": b0, "b1_inf": b1, "gamma_inf": gi, "b0_death": d0,
                       "gamma_death": gd, "capped": capped}
    return panel


def check_layout_support(design):
    """True when every triangle of the design mesh contains a region."""
    loc = region_layout(design)[0]
    mesh = design.mesh()
    ids, _ = locate_all(mesh, loc)
    return bool(np.all(ids >= 0) and len(np.unique(ids)) == mesh.M)


# --------------------------------------------------------------- baselines

@dataclass
class BaselineFit:
    """Per-region (linear, exponential) or pooled (em) forecasting baseline."""

    method: str
    t: int
    params: dict

    def predict(self, H, panel=None):
        """New cases and new deaths for days ``t+1 .. t+H``, each of shape (n, H)."""
        steps = np.arange(1, H + 1)
        if self.method == "linear":
            y = np.repeat(np.maximum(self.params["slope_c"], 0.0)[:, None], H, axis=1)
            d = np.repeat(np.maximum(self.params["slope_d"], 0.0)[:, None], H, axis=1)
            return y, d
        if self.method == "exponential":
            out = []
            for key in ("c", "d"):
                a, b = self.params[f"a_{key}"], self.params[f"b_{key}"]
                tt = self.t + np.r_[0, steps] - self.params["t_mid"]
                with np.errstate(over="ignore"):
                    level = np.exp(a[:, None] + b[:, None] * tt[None, :])
                out.append(np.diff(level, axis=1))
            return out[0], out[1]
        return self._em_path(H, panel)

    def _em_path(self, H, panel):
        if panel is None:
            raise InputError("the em baseline needs the panel to run its recursion")
        p = self.params
        t, lag = self.t, p["death_lag"]
        I_hist = [panel.active[:, s] for s in range(panel.n_days) if s <= t]
        I = panel.active[:, t].copy()
        ys, ds = [], []
        for h in range(1, H + 1):
            s = t + h
            y = np.exp(p["b0"] + p["b1"] * np.log(I + 1.0))
            i_lag = I_hist[s - lag]
            d = np.exp(p["b0_d"] + p["b1_d"] * np.log(i_lag + 1.0))
            rec = p["nu"] * I
            d = np.minimum(d, np.maximum(I + y - rec, 0.0))
            I = I + y - rec - d
            I_hist.append(I)
            ys.append(y)
            ds.append(d)
        return np.column_stack(ys), np.column_stack(ds)


def _ols_slopes(t, V):
    tc = t - t.mean()
    return (V - V.mean(axis=1, keepdims=True)) @ tc / (tc @ tc)


def _poisson_line(t, v):
    """Poisson log-link fit of ``v`` on ``t`` (already centered); all-zero rows give -inf level."""
    if np.all(v == 0):
        return -np.inf, 0.0
    F = np.column_stack([np.ones_like(t), t])
    design = glm.DesignBlock(F, ["a", "b"], [], [], np.zeros((len(t), 2), int))
    fit = glm.pirls_fit(design, v, glm.Family("poisson"), tol=1e-10)
    return float(fit.coef[0]), float(fit.coef[1])


def fit_baseline(panel, t, method, t0=13, death_lag=14, recovery_rate=None):
    """Fit a baseline on days ``t - t0 .. t``.

    ``linear`` and ``exponential`` regress cumulative counts on the day
    index region by region; ``em`` is a pooled two-parameter log-link model
    in the lagged active count.
    """
    if method not in ("linear", "exponential", "em"):
        raise InputError(f"unknown baseline {method!r}")
    if t0 < 1:
        raise InputError("baselines need at least 2 time points per region")
    days = np.arange(t - t0, t + 1)
    if days[0] < 0 or t >= panel.n_days:
        raise InputError(f"window [{days[0]}, {t}] is outside the panel")
    tt = days.astype(float)
    C, D = panel.cum_cases[:, days], panel.cum_deaths[:, days]
    if method == "linear":
        return BaselineFit("linear", t, {"slope_c": _ols_slopes(tt, C), "slope_d": _ols_slopes(tt, D)})
    if method == "exponential":
        mid = tt.mean()
        par = {"t_mid": mid}
        for key, V in (("c", C), ("d", D)):
            ab = np.array([_poisson_line(tt - mid, v) for v in V])
            par[f"a_{key}"], par[f"b_{key}"] = ab[:, 0], ab[:, 1]
        return BaselineFit("exponential", t, par)
    if days[0] - death_lag < 0:
        raise InputError(f"em baseline needs day {days[0] - death_lag}")
    fam = glm.Family("poisson")
    out = {"death_lag": death_lag}
    for key, lag, V in (("", 1, panel.new_cases), ("_d", death_lag, panel.new_deaths)):
        x = np.log(panel.active[:, days - lag] + 1.0).T.ravel()
        y = V[:, days].T.ravel()
        if y.sum() == 0:
            out["b0" + key], out["b1" + key] = -np.inf, 0.0
            continue
        F = np.column_stack([np.ones_like(x), x])
        design = glm.DesignBlock(F, ["b0", "b1"], [], [], np.zeros((len(x), 2), int))
        coef = glm.pirls_fit(design, y, fam).coef
        out["b0" + key], out["b1" + key] = float(coef[0]), float(coef[1])
    if recovery_rate is None:
        I = panel.active[:, days - 1].ravel()
        dR = panel.new_recovered[:, days].ravel()
        recovery_rate = float(np.clip(I @ dR / max(I @ I, 1e-300), 0, 1))
    out["nu"] = recovery_rate
    return BaselineFit("em", t, out)


# ------------------------------------------------------------------ RMSPE

def rmspe(predicted, observed, horizons=None):
    """``R_h`` averaged over forecast origins.

    Parameters
    ----------
    predicted, observed : arrays of shape (n_origins, n_regions, H) or (n_regions, H)
    horizons : 1-based steps to report; all steps by default

    Returns
    -------
    ndarray of ``R_h`` for the requested horizons.
    """
    P = np.asarray(predicted, float)
    O = np.asarray(observed, float)
    if P.shape != O.shape or P.size == 0:
        raise InputError(f"cannot align predictions {P.shape} with observations {O.shape}")
    if P.ndim == 2:
        P, O = P[None], O[None]
    r = np.sqrt(np.mean((P - O) ** 2, axis=1)).mean(axis=0)
    if horizons is None:
        return r
    idx = np.asarray(horizons, int) - 1
    if np.any(idx < 0) or np.any(idx >= P.shape[2]):
        raise InputError(f"horizons {list(horizons)} outside 1..{P.shape[2]}")
    return r[idx]


# ------------------------------------------------------------------- bench

@dataclass
class BenchReport:
    """Tables from a simulation benchmark.

    ``rmse`` has columns replicate, seed, window, model, component, rmse;
    ``rmspe`` has replicate, seed, window, method, target, horizon, rmspe;
    ``coverage`` has quantile, target, coverage.
    """

    rmse: pd.DataFrame
    rmspe: pd.DataFrame
    coverage: pd.DataFrame = None
    meta: dict = field(default_factory=dict)

    def median_rmse(self, component="beta1", model="infection"):
        sub = self.rmse[(self.rmse.component == component) & (self.rmse.model == model)]
        return sub.groupby("window")["rmse"].median()

    def summary(self):
        lines = [f"replicates: {self.meta.get('replicates')}  master seed: {self.meta.get('seed')}",
                 "median RMSE by window:"]
        tab = self.rmse.groupby(["model", "component", "window"])["rmse"].median().unstack("window")
        lines.append(tab.to_string(float_format=lambda v: f"{v:.4f}"))
        if len(self.rmspe):
            lines.append("mean RMSPE by horizon:")
            tab = self.rmspe.groupby(["target", "window", "method", "horizon"])["rmspe"].mean() \
                .unstack("horizon")
            lines.append(tab.to_string(float_format=lambda v: f"{v:.3f}"))
        if self.coverage is not None and len(self.coverage):
            lines.append("band coverage quantiles across regions:")
            lines.append(self.coverage.to_string(index=False))
        return "\n".join(lines)

    def to_csv(self, out_dir):
        import os
        os.makedirs(out_dir, exist_ok=True)
        self.rmse.to_csv(os.path.join(out_dir, "bench_rmse.csv"), index=False)
        self.rmspe.to_csv(os.path.join(out_dir, "bench_rmspe.csv"), index=False)
        if self.coverage is not None:
            self.coverage.to_csv(os.path.join(out_dir, "bench_coverage.csv"), index=False)
        with open(os.path.join(out_dir, "bench_summary.txt"), "w") as fh:
            fh.write(self.summary() + "\n")


def replicate_seeds(master_seed, replicates):
    """Independent per-replicate seeds spawned from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(replicates)]


def stem_config_for(design, t0, **overrides):
    from .stem import StemConfig
    mesh = design.mesh()
    fam = "zip" if design.family == "zip" else "poisson"
    kw = dict(t0=t0, death_lag=design.death_lag, action_lag=design.action_lag,
              death_action_lag=design.death_action_lag, infection_family=fam, death_family=fam,
              infection_mesh=mesh, death_mesh=mesh)
    kw.update(overrides)
    return StemConfig(**kw)


def _component_rmse(design, truth, inf, death, panel):
    """RMSE per component at the region locations.

    Intercept errors include the additive terms, since the split of a
    constant between them is arbitrary; curves are compared after removing
    their sample means.
    """
    from .stem import eval_curves
    rows = []
    _, b1 = inf.region_terms()[:2]
    b0, _, gam = inf.region_terms()[:3]
    m = inf.region_mask
    true_gsum = truth["gamma_inf"][m]
    rows.append(("infection", "beta0", np.sqrt(np.mean((b0 + gam - truth["b0_inf"][m] - true_gsum) ** 2))))
    rows.append(("infection", "beta1", np.sqrt(np.mean((b1 - truth["b1_inf"][m]) ** 2))))
    alpha = inf.coef[1:inf.n_params]
    for j, a in enumerate(alpha):
        rows.append(("infection", f"alpha{j + 1}", abs(a - design.alpha_inf[j])))
    X = panel.covariates[m]
    for k, s in enumerate(design.gamma_inf):
        est = eval_curves(inf, k, X[:, k])
        tru = true_curve(k, s, X[:, k])
        rows.append(("infection", f"gamma{k + 1}",
                     np.sqrt(np.mean(((est - est.mean()) - (tru - tru.mean())) ** 2))))
    if not death.degenerate:
        b0d, b1d, gd = death.region_terms()[:3]
        rows.append(("death", "beta0", np.sqrt(np.mean((b0d + gd - truth["b0_death"][m]
                                                        - truth["gamma_death"][m]) ** 2))))
        rows.append(("death", "beta1", abs(b1d[0] - design.beta1_death)))
    return rows


def run_replicate(design, seed, windows=(9, 14), origin=31, horizons=(7, 14, 28), methods=("linear",),
                  lambda_grid=None):
    """Fit every window on one simulated panel; returns (rmse rows, rmspe rows)."""
    from dataclasses import replace as dc_replace
    from .forecast import predict_path
    from .stem import estimate_recovery_rate, fit_death, fit_infection
    d = dc_replace(design, seed=seed)
    panel, truth = simulate_panel(d, return_truth=True)
    H = max(horizons)
    if origin + H >= panel.n_days:
        raise InputError(f"origin {origin} + horizon {H} exceeds the {panel.n_days}-day panel")
    obs_y = panel.new_cases[:, origin + 1: origin + H + 1]
    obs_d = panel.new_deaths[:, origin + 1: origin + H + 1]
    rmse_rows, rmspe_rows = [], []
    for w in windows:
        extra = {} if lambda_grid is None else {"lambda_grid": tuple(lambda_grid)}
        cfg = stem_config_for(d, w - 1, **extra)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            inf = fit_infection(panel.truncate(origin), origin, cfg)
            death = fit_death(panel.truncate(origin), origin, cfg)
        nu = estimate_recovery_rate(panel, origin, cfg)
        for model, comp, val in _component_rmse(d, truth, inf, death, panel):
            rmse_rows.append((seed, w, model, comp, float(val)))
        path = predict_path(inf, death, nu, panel.truncate(origin), origin, H)
        preds = {"stem": (path.yhat, path.dhat)}
        for m in methods:
            bl = fit_baseline(panel, origin, m, t0=w - 1, death_lag=d.death_lag, recovery_rate=nu)
            preds[m] = bl.predict(H, panel)
        for method, (py, pdth) in preds.items():
            for target, pr, ob in (("cases", py, obs_y), ("deaths", pdth, obs_d)):
                r = rmspe(pr, ob, horizons)
                for h, v in zip(horizons, r):
                    rmspe_rows.append((seed, w, method, target, int(h), float(v)))
    return rmse_rows, rmspe_rows


def run_bench(design, replicates=20, seed=0, windows=(9, 14), origin=31, horizons=(7, 14, 28),
              methods=("linear",), lambda_grid=None, progress=None):
    """Simulation benchmark over independently seeded replicates."""
    seeds = replicate_seeds(seed, replicates)
    rmse_rows, rmspe_rows = [], []
    for r, s in enumerate(seeds):
        a, b = run_replicate(design, s, windows, origin, horizons, methods, lambda_grid)
        rmse_rows += [(r,) + row for row in a]
        rmspe_rows += [(r,) + row for row in b]
        if progress:
            progress(r + 1, replicates)
    rmse_df = pd.DataFrame(rmse_rows, columns=["replicate", "seed", "window", "model", "component", "rmse"])
    rmspe_df = pd.DataFrame(rmspe_rows, columns=["replicate", "seed", "window", "method", "target",
                                                 "horizon", "rmspe"])
    return BenchReport(rmse_df, rmspe_df, meta={"replicates": replicates, "seed": seed,
                                                "windows": list(windows), "origin": origin,
                                                "design": json.loads(design.to_json())})


def band_coverage_replicate(design, seed, origin=31, window=14, H=14, B=200, alpha=0.05,
                            distance="squared"):
    """Per-region indicator that the simulated future stays inside the band at every step.

    Returns ``(cases_covered, deaths_covered)``, boolean arrays over regions.
    """
    from dataclasses import replace as dc_replace
    from .forecast import bootstrap_bias_correct, bootstrap_paths, envelope_band, predict_path
    d = dc_replace(design, seed=seed)
    panel = simulate_panel(d)
    if origin + H >= panel.n_days:
        raise InputError(f"origin {origin} + horizon {H} exceeds the {panel.n_days}-day panel")
    cfg = stem_config_for(d, window - 1)
    past = panel.truncate(origin)
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        boot = bootstrap_bias_correct(past, origin, cfg, B, seed=rng)
        ys, ds = bootstrap_paths(boot, past, H, seed=rng)
        center = predict_path(boot.corrected_infection, boot.corrected_death, boot.recovery_rate, past,
                              origin, H)
    out = []
    for paths, mid, obs in ((ys, center.yhat, panel.new_cases), (ds, center.dhat, panel.new_deaths)):
        band = envelope_band(paths, mid, alpha, distance)
        truth = obs[boot.base_infection.region_mask, origin + 1: origin + H + 1]
        out.append(np.all((truth >= band.lower) & (truth <= band.upper), axis=1))
    return out[0], out[1]


def run_coverage(design, replicates=100, seed=0, origin=31, window=14, H=14, B=200, alpha=0.05,
                 distance="squared", progress=None):
    """Per-region coverage rates over replicates; returns (cases, deaths) arrays."""
    seeds = replicate_seeds(seed, replicates)
    cases, deaths = [], []
    for r, s in enumerate(seeds):
        c, d = band_coverage_replicate(design, s, origin, window, H, B, alpha, distance)
        cases.append(c)
        deaths.append(d)
        if progress:
            progress(r + 1, replicates)
    return np.mean(cases, axis=0), np.mean(deaths, axis=0)


def coverage_table(cases, deaths, quantiles=(0.25, 0.5, 0.75)):
    rows = [(q, target, float(np.quantile(v, q))) for target, v in (("cases", cases), ("deaths", deaths))
            for q in quantiles]
    return pd.DataFrame(rows, columns=["quantile", "target", "coverage"])
