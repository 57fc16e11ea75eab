"""Command-line front end.

Settings come from a ``key = value`` file given by ``--config`` and are
overridden by flags. Every run writes ``manifest.json`` into ``--out`` with
the seed and a hash of the resolved settings.
"""

import argparse
import hashlib
import json
import os
import sys
import warnings

import numpy as np
import pandas as pd

from . import glm
from ._validation import InputError

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_MISSING = 0, 2, 3, 4

DEFAULTS = {
    "panel": None, "regions": None, "actions": None, "vertices": None, "triangles": None,
    "mesh_n": 4, "t": None, "window": 28, "horizon": 14, "family": None, "death_family": None,
    "alpha": 0.05, "B": 0, "distance": "squared", "seed": 0, "out": "stemepi_out",
    "lambda_grid": None, "recovery_rate": None, "recovery_prior": 0.10, "degree": 2, "smoothness": 1,
    "death_lag": 14, "action_lag": 7, "death_action_lag": 7, "design": None, "replicates": 20,
    "windows": "9,14", "origin": 31, "horizons": "7,14,28", "coverage_replicates": 0,
    "grid_points": 20,
}
INT_KEYS = {"mesh_n", "t", "window", "horizon", "B", "seed", "degree", "smoothness", "death_lag",
            "action_lag", "death_action_lag", "replicates", "origin", "coverage_replicates", "grid_points"}
FLOAT_KEYS = {"alpha", "recovery_rate", "recovery_prior"}


class MissingPrerequisite(Exception):
    pass


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    base = os.path.dirname(os.path.abspath(path))
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise InputError(f"{path}:{n}: unknown key {key!r}")
        if key in ("panel", "regions", "actions", "vertices", "triangles", "design") and val:
            val = val if os.path.isabs(val) else os.path.join(base, val)
        out[key] = val
    return out


def _coerce(key, val):
    if val is None or val == "":
        return None
    if key in INT_KEYS:
        return int(val)
    if key in FLOAT_KEYS:
        return float(val)
    return val


def resolve(args):
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None and key != "window":
            cfg[key] = v
    windows = getattr(args, "window", None)
    if windows and args.command == "bench":
        cfg["windows"] = ",".join(str(w) for w in windows)
    elif windows:
        cfg["window"] = windows[-1]
    try:
        cfg = {k: _coerce(k, v) for k, v in cfg.items()}
    except ValueError as exc:
        raise InputError(f"bad setting: {exc}") from None
    return cfg


def config_hash(cfg):
    blob = json.dumps({k: cfg[k] for k in sorted(cfg) if k != "out"}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_manifest(cfg, artifacts, extra=None):
    meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "artifacts": sorted(artifacts),
            "config": cfg}
    meta.update(extra or {})
    with open(os.path.join(cfg["out"], "manifest.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def _lambda_grid(cfg):
    from .stem import DEFAULT_LAMBDA_GRID
    if not cfg["lambda_grid"]:
        return DEFAULT_LAMBDA_GRID
    vals = [float(v) for v in str(cfg["lambda_grid"]).split(",")]
    return tuple((a, b) for a in vals for b in vals)


def _mesh(cfg):
    from .mesh import grid_mesh, load_mesh
    if cfg["vertices"] or cfg["triangles"]:
        if not (cfg["vertices"] and cfg["triangles"]):
            raise InputError("both vertices and triangles files are needed")
        return load_mesh(cfg["vertices"], cfg["triangles"])
    return grid_mesh(cfg["mesh_n"], cfg["mesh_n"])


def _panel(cfg):
    from .stem import read_panel
    if not cfg["panel"] or not cfg["regions"]:
        raise InputError("panel and regions files are required")
    return read_panel(cfg["panel"], cfg["regions"], cfg["actions"], recovery_rate=cfg["recovery_rate"])


def _stem_config(cfg, mesh):
    from .stem import StemConfig
    if cfg["window"] is None or cfg["window"] < 2:
        raise InputError("window must be at least 2 days")
    return StemConfig(t0=cfg["window"] - 1, death_lag=cfg["death_lag"], action_lag=cfg["action_lag"],
                      death_action_lag=cfg["death_action_lag"], infection_family=cfg["family"] or "poisson",
                      death_family=cfg["death_family"] or cfg["family"] or "poisson", lambda_grid=_lambda_grid(cfg),
                      degree=cfg["degree"], smoothness=cfg["smoothness"], infection_mesh=mesh,
                      death_mesh=mesh, recovery_prior=cfg["recovery_prior"])


def _fit(cfg):
    from .stem import estimate_recovery_rate, fit_death, fit_infection
    panel = _panel(cfg)
    mesh = _mesh(cfg)
    scfg = _stem_config(cfg, mesh)
    t = panel.n_days - 1 if cfg["t"] is None else cfg["t"]
    past = panel.truncate(t)
    inf = fit_infection(past, t, scfg)
    death = fit_death(past, t, scfg)
    nu = estimate_recovery_rate(past, t, scfg)
    return panel, past, scfg, t, inf, death, nu


def _fit_record(fit, cfg, nu):
    res = fit.result
    return {"submodel": fit.submodel, "window": int(fit.window[1] - fit.window[0] + 1),
            "window_start": int(fit.window[0]), "window_end": int(fit.window[1]),
            "family": fit.family.kind, "lambdas": list(res.lambdas), "coef_names": fit.design.param_names,
            "alpha": [float(v) for v in res.alpha], "zip_params": None if res.zip_params is None
            else list(res.zip_params), "iterations": res.iterations, "converged": res.converged,
            "deviance": res.deviance, "edf": res.edf, "gcv": res.gcv, "degenerate": fit.degenerate,
            "recovery_rate": nu, "dropped_regions": list(fit.dropped_regions),
            "config_hash": config_hash(cfg), "seed": cfg["seed"]}


def cmd_fit(cfg):
    from .forecast import bootstrap_bias_correct
    from .stem import eval_curves, eval_surfaces
    panel, past, scfg, t, inf, death, nu = _fit(cfg)
    out = cfg["out"]
    artifacts = ["fit.jsonl", "surfaces.csv", "curves.csv"]
    with open(os.path.join(out, "fit.jsonl"), "w") as fh:
        for f in (inf, death):
            fh.write(json.dumps(_fit_record(f, cfg, nu), default=float) + "\n")
    g = np.linspace(0, 1, cfg["grid_points"])
    mesh = scfg.infection_mesh
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    pts = np.column_stack([np.tile(lo[0] + g * (hi[0] - lo[0]), len(g)),
                           np.repeat(lo[1] + g * (hi[1] - lo[1]), len(g))])
    from .mesh import locate_all
    pts = pts[locate_all(mesh, pts)[0] >= 0]
    b0, b1 = eval_surfaces(inf, pts)
    surf = pd.DataFrame({"u1": pts[:, 0], "u2": pts[:, 1], "beta0_infection": b0, "beta1_infection": b1})
    if not death.degenerate:
        surf["beta0_death"] = eval_surfaces(death, pts)[0]
    surf.to_csv(os.path.join(out, "surfaces.csv"), index=False, float_format="%.10g")
    rows = []
    for k in inf.covariate_index:
        x = np.linspace(inf.unibases[inf.covariate_index.index(k)].lower,
                        inf.unibases[inf.covariate_index.index(k)].upper, 101)
        gi = eval_curves(inf, k, x)
        gd = eval_curves(death, k, x) if not death.degenerate else np.full_like(x, np.nan)
        rows.append(pd.DataFrame({"covariate": f"x{k + 1}", "x": x, "gamma_infection": gi,
                                  "gamma_death": gd}))
    (pd.concat(rows) if rows else pd.DataFrame(columns=["covariate", "x", "gamma_infection", "gamma_death"])) \
        .to_csv(os.path.join(out, "curves.csv"), index=False, float_format="%.10g")
    extra = {}
    if cfg["B"]:
        boot = bootstrap_bias_correct(past, t, scfg, cfg["B"], seed=cfg["seed"], inf_fit=inf,
                                      death_fit=death, nu=nu)
        np.savez(os.path.join(out, "bootstrap.npz"), replicate_infection=boot.replicate_infection,
                 replicate_death=boot.replicate_death, zip_infection=boot.replicate_zip_infection,
                 zip_death=boot.replicate_zip_death, config_hash=config_hash(_boot_key(cfg)),
                 B=cfg["B"], n_failed=boot.n_failed)
        artifacts.append("bootstrap.npz")
        extra["bootstrap_failed"] = boot.n_failed
    _write_manifest(cfg, artifacts, extra)
    print(f"fit at day {t}: lambdas {inf.lambdas}, recovery rate {nu:.4f}; wrote {', '.join(artifacts)}")
    return EXIT_OK


def _boot_key(cfg):
    """Settings a bootstrap artifact depends on (band options excluded)."""
    return {k: v for k, v in cfg.items() if k not in ("alpha", "distance", "horizon", "out")}


def _forecast_frame(path, lower=None, upper=None):
    n, H = path.yhat.shape
    dates = path.dates if path.dates is not None else np.arange(path.t + 1, path.t + H + 1)
    dates = np.datetime_as_string(dates, unit="D") if np.issubdtype(np.asarray(dates).dtype, np.datetime64) \
        else dates
    return pd.DataFrame({
        "region_id": np.repeat(path.region_ids.astype(str), H),
        "date": np.tile(dates, n),
        "yhat": path.yhat.ravel(), "dhat_new": path.dhat.ravel(), "rhat_new": path.rhat.ravel(),
        "c_hat": path.C.ravel(), "i_hat": path.I.ravel(),
        "band_lo": np.nan if lower is None else lower.ravel(),
        "band_hi": np.nan if upper is None else upper.ravel(),
    })


def cmd_forecast(cfg):
    from .forecast import predict_path
    panel, past, scfg, t, inf, death, nu = _fit(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        path = predict_path(inf, death, nu, past, t, cfg["horizon"])
    _forecast_frame(path).to_csv(os.path.join(cfg["out"], "forecast.csv"), index=False, float_format="%.10g")
    _write_manifest(cfg, ["forecast.csv"])
    print(f"forecast from day {t} for {cfg['horizon']} days; wrote forecast.csv")
    return EXIT_OK


def cmd_band(cfg):
    from .forecast import BootstrapResult, bootstrap_paths, envelope_band, n_deleted, predict_path
    art = os.path.join(cfg["out"], "bootstrap.npz")
    if not os.path.exists(art):
        raise MissingPrerequisite(f"{art} not found; run `stemepi fit --B N` first")
    with np.load(art) as z:
        stored = {k: z[k] for k in z.files}
    if str(stored["config_hash"]) != config_hash(_boot_key(cfg)):
        raise MissingPrerequisite(f"{art} was made with different settings; rerun `stemepi fit --B N`")
    if cfg["B"] and int(stored["B"]) != cfg["B"]:
        raise MissingPrerequisite(f"{art} holds B={int(stored['B'])} replicates, not {cfg['B']}")
    if cfg["alpha"] * int(stored["B"]) < 1:
        raise InputError("alpha * B must be at least 1 for a band")
    panel, past, scfg, t, inf, death, nu = _fit(cfg)
    Ri, Rd = stored["replicate_infection"], stored["replicate_death"]
    boot = BootstrapResult(inf, death, inf.with_coef(2 * inf.coef - Ri.mean(axis=0)),
                           death if death.degenerate else death.with_coef(2 * death.coef - Rd.mean(axis=0)),
                           Ri, Rd, stored["zip_infection"], stored["zip_death"], nu, t,
                           int(stored["n_failed"]), cfg["seed"])
    H = cfg["horizon"]
    rng = np.random.default_rng([cfg["seed"], 1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ys, ds = bootstrap_paths(boot, past, H, seed=rng)
        center = predict_path(boot.corrected_infection, boot.corrected_death, nu, past, t, H)
        point = predict_path(inf, death, nu, past, t, H)
    bands = {"cases": envelope_band(ys, center.yhat, cfg["alpha"], cfg["distance"]),
             "deaths": envelope_band(ds, center.dhat, cfg["alpha"], cfg["distance"], target="deaths")}
    out = cfg["out"]
    _forecast_frame(point, bands["cases"].lower, bands["cases"].upper).to_csv(
        os.path.join(out, "forecast.csv"), index=False, float_format="%.10g")
    frames = []
    for target, band in bands.items():
        f = _forecast_frame(center, band.lower, band.upper)[["region_id", "date", "band_lo", "band_hi"]]
        f.insert(2, "target", target)
        f.insert(3, "center", (center.yhat if target == "cases" else center.dhat).ravel())
        frames.append(f)
    pd.concat(frames).to_csv(os.path.join(out, "band.csv"), index=False, float_format="%.10g")
    meta = {"alpha": cfg["alpha"], "B": int(stored["B"]), "distance": cfg["distance"], "seed": cfg["seed"],
            "deleted_paths": n_deleted(cfg["alpha"], len(Ri)), "horizon": H,
            "config_hash": config_hash(cfg)}
    with open(os.path.join(out, "band_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    _write_manifest(cfg, ["forecast.csv", "band.csv", "band_meta.json"])
    print(f"{100 * (1 - cfg['alpha']):g}% bands from {len(Ri)} paths ({meta['deleted_paths']} deleted per region)")
    return EXIT_OK


def _design(cfg):
    from .simulate import SimDesign
    if cfg["design"]:
        try:
            d = SimDesign.load(cfg["design"])
        except FileNotFoundError:
            raise InputError(f"design file not found: {cfg['design']}") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise InputError(f"bad design file: {exc}") from None
    else:
        d = SimDesign()
    from dataclasses import replace
    if cfg["family"] is not None:
        if cfg["family"] not in ("zip", "poisson"):
            raise InputError(f"the simulator draws zip or poisson counts, not {cfg['family']}")
        d = replace(d, family=cfg["family"], death_family=cfg["family"])
    return replace(d, seed=cfg["seed"])


def cmd_simulate(cfg):
    from .mesh import save_mesh
    from .simulate import simulate_panel
    from .stem import write_panel
    d = _design(cfg)
    panel = simulate_panel(d)
    out = cfg["out"]
    write_panel(panel, os.path.join(out, "panel.csv"), os.path.join(out, "regions.csv"),
                os.path.join(out, "actions.csv"), start_date=d.start_date)
    save_mesh(d.mesh(), os.path.join(out, "vertices.csv"), os.path.join(out, "triangles.csv"))
    d.save(os.path.join(out, "design.json"))
    _write_manifest(cfg, ["panel.csv", "regions.csv", "actions.csv", "vertices.csv", "triangles.csv",
                          "design.json"])
    print(f"simulated {panel.n_regions} regions over {panel.n_days} days (seed {d.seed})")
    return EXIT_OK


def cmd_bench(cfg):
    from .simulate import coverage_table, run_bench, run_coverage
    d = _design(cfg)
    windows = tuple(int(w) for w in str(cfg["windows"]).split(","))
    horizons = tuple(int(h) for h in str(cfg["horizons"]).split(","))

    def progress(r, n):
        print(f"  replicate {r}/{n}", file=sys.stderr, flush=True)

    rep = run_bench(d, replicates=cfg["replicates"], seed=cfg["seed"], windows=windows, origin=cfg["origin"],
                    horizons=horizons, lambda_grid=_lambda_grid(cfg) if cfg["lambda_grid"] else None,
                    progress=progress)
    if cfg["coverage_replicates"]:
        B = cfg["B"] or 200
        c, dd = run_coverage(d, cfg["coverage_replicates"], cfg["seed"], cfg["origin"], windows[-1],
                             cfg["horizon"], B, cfg["alpha"], cfg["distance"], progress=progress)
        rep.coverage = coverage_table(c, dd)
    rep.meta["config_hash"] = config_hash(cfg)
    rep.to_csv(cfg["out"])
    arts = ["bench_rmse.csv", "bench_rmspe.csv", "bench_summary.txt"] + \
        (["bench_coverage.csv"] if rep.coverage is not None else [])
    _write_manifest(cfg, arts)
    print(rep.summary())
    return EXIT_OK


def cmd_mesh_info(cfg):
    from .bpst import cached_basis
    mesh = _mesh(cfg)
    basis = cached_basis(mesh, cfg["degree"], cfg["smoothness"])
    ang = np.degrees(mesh.min_angles())
    info = {"triangles": mesh.M, "vertices": mesh.n_vertices, "interior_edges": len(mesh.interior_edges()),
            "area": float(mesh.areas().sum()), "min_angle_deg": float(ang.min()),
            "degree": cfg["degree"], "smoothness": cfg["smoothness"], "n_basis": basis.n_basis,
            "n_reduced": basis.n_reduced, "digest": mesh.digest}
    print(json.dumps(info, indent=2))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "forecast": cmd_forecast, "band": cmd_band, "simulate": cmd_simulate,
            "bench": cmd_bench, "mesh-info": cmd_mesh_info}


def build_parser():
    p = argparse.ArgumentParser(prog="stemepi", description="Spatiotemporal epidemic model tools")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--family", choices=["poisson", "nb", "zip"])
        s.add_argument("--window", type=int, action="append")
        s.add_argument("--horizon", type=int)
        s.add_argument("--alpha", type=float)
        s.add_argument("--B", type=int)
        s.add_argument("--distance", choices=["squared", "absolute"])
        s.add_argument("--t", type=int, help="forecast origin (day index)")
        s.add_argument("--design", help="simulation design JSON")
        s.add_argument("--replicates", type=int)
        s.add_argument("--coverage-replicates", dest="coverage_replicates", type=int)
        for key in ("panel", "regions", "actions", "vertices", "triangles"):
            s.add_argument(f"--{key}")
        s.add_argument("--mesh-n", dest="mesh_n", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        os.makedirs(cfg["out"], exist_ok=True)
        return COMMANDS[args.command](cfg)
    except MissingPrerequisite as exc:
        print(f"stemepi: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InputError, FileNotFoundError) as exc:
        print(f"stemepi: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (glm.SolverError, np.linalg.LinAlgError) as exc:
        print(f"stemepi: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
