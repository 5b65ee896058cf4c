"""Command-line entry point: ``delaysmooth --config run.yaml --out results/``.

Each experiment writes CSV tables, ``summary.json`` (with the SHA-256 of the
resolved config) and ``resolved_config.json``. Exit status is 0 on success,
2 on invalid input and 3 when a declared check fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys as _sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import control as ctl
from .catalog import Catalog
from .config import (EXPERIMENTS, RunConfig, build_named, build_segment, build_system,
                     load_config, time_list)
from .dynamics import EulerScheme
from .errors import DelaySmoothError, NonContractionError, ValidationError
from .kolmogorov import SolverConfig, linear_solve, picard_solve, sigma_eval
from .rng import MCConfig, path_normals, run_chunks
from .smoothing import (covariance, gradient_rate_probe, smoothing_rate_probe,
                        strong_feller_failure_probe)

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3
_STREAM_SIMULATE = 31

Table = Tuple[List[str], List[Sequence[float]]]


class Outcome:
    def __init__(self):
        self.tables: Dict[str, Table] = {}
        self.summary: Dict = {}
        self.checks: Dict[str, bool] = {}

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, table: Table) -> None:
    header, rows = table
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _observable(cfg: RunConfig, cat: Catalog, sys, key: str = "observable"):
    spec = cfg.require(key)
    args = spec.get("args", {}) if isinstance(spec, dict) else {}
    extra = {} if "n" in args else {"n": sys.n}
    return build_named(cat, "observables", spec, **extra)


def _mc(cfg: RunConfig, threads: int) -> MCConfig:
    return MCConfig(paths=int(cfg.get("paths", 10000)), seed=int(cfg.get("seed", 0)),
                    dt=cfg.get("dt"), threads=threads)


def _check_range(out: Outcome, name: str, value: float, bounds) -> None:
    if bounds is not None:
        lo, hi = bounds
        out.checks[name] = bool(lo <= value <= hi)


def run_simulate(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    x = build_segment(cfg.get("x"), sys)
    T, dt = float(cfg.require("T")), float(cfg.get("dt", x.h))
    mc = _mc(cfg, threads)
    scheme = EulerScheme(sys, dt)
    steps = int(round(T / scheme.dt))
    drift = cfg.get("drift")
    drift = None if drift is None else build_named(cat, "drifts", drift, pf=pf)
    from .smoothing import _drift_forcing, _nonzero, _reduce
    drift_nz = None if drift is None else _nonzero(
        scheme.reduction_weights(pf.alpha0, pf.tail_measure))
    obs_nz = _nonzero(scheme.reduction_weights(pf.alpha0, pf.tail_measure))
    buf0 = scheme.initial_buffer(x)
    keep = int(cfg.get("save_paths", 5))

    def block(idx):
        dW = math.sqrt(scheme.dt) * path_normals(mc.seed, _STREAM_SIMULATE, idx, (steps, sys.n))
        path = scheme.run(np.broadcast_to(buf0, (idx.size,) + buf0.shape), steps, dW,
                          _drift_forcing(drift, drift_nz))
        heads = path[:, scheme.K:, 0]
        y_T = _reduce(path[:, steps:], *obs_nz)[:, 0]
        return {"heads": heads[: max(0, keep - int(idx[0]))], "sum": heads.sum(0)[None],
                "sq": (heads ** 2).sum(0)[None], "yT": y_T}

    res = run_chunks(block, mc.paths, mc.chunk, threads)
    mean = res["sum"].sum(0) / mc.paths
    var = res["sq"].sum(0) / mc.paths - mean ** 2
    times = scheme.dt * np.arange(steps + 1)
    heads = res["heads"][:keep]
    out = Outcome()
    out.tables["paths"] = (["t", "head_mean", "head_var"] + [f"path_{i}" for i in range(len(heads))],
                           [[times[k], mean[k], var[k]] + list(heads[:, k])
                            for k in range(steps + 1)])
    out.summary = {"paths": mc.paths, "steps": steps, "dt": scheme.dt,
                   "terminal_reduced_mean": float(res["yT"].mean()),
                   "terminal_reduced_var": float(res["yT"].var(ddof=1))}
    return out


def run_covariance(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    times = time_list(cfg.require("times"))
    s = float(cfg.get("s", 0.0))
    q = int(cfg.get("quad_nodes", 16))
    out = Outcome()
    n = sys.n
    header = ["t"] + [f"q_{i}{j}" for i in range(n) for j in range(n)] + ["lambda_min"]
    rows, rel = [], []
    ref = cfg.get("reference")
    if ref == "t":
        header.append("reference")
    for t in times:
        c = covariance(sys, pf, s, float(t), q)
        row = [t] + list(c.value.ravel()) + [c.lambda_min]
        if ref == "t":
            row.append(t - s)
            rel.append(abs(c.value[0, 0] - (t - s)) / (t - s))
        rows.append(row)
    out.tables["covariance"] = (header, rows)
    if ref == "t":
        err = max(rel)
        out.summary["max_relative_error"] = err
        out.checks["reference"] = err <= float(cfg.get("tolerance", 1e-10))
    return out


def run_smoothing_rate(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    fit = smoothing_rate_probe(sys, pf, time_list(cfg.require("times")),
                               int(cfg.get("quad_nodes", 16)))
    out = Outcome()
    out.tables["rate"] = (["t", "lambda_min"], [[t, v] for t, v in zip(fit.t, fit.values)])
    out.summary = {"slope": fit.slope, "intercept": fit.intercept, "singular": fit.singular,
                   "regime": pf.regime}
    _check_range(out, "slope", fit.slope, cfg.get("expect_slope"))
    return out


def run_gradient_rate(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    phibar = _observable(cfg, cat, sys)
    x = build_segment(cfg.get("x"), sys)
    h = build_segment(cfg.get("h", {"head": 1.0}), sys)
    fit = gradient_rate_probe(sys, pf, phibar, x, h, time_list(cfg.require("times")))
    out = Outcome()
    out.tables["gradient"] = (["t", "abs_gradient"], [[t, v] for t, v in zip(fit.t, fit.values)])
    out.summary = {"slope": fit.slope, "intercept": fit.intercept}
    _check_range(out, "slope", fit.slope, cfg.get("expect_slope"))
    return out


def _feller_cases(cfg):
    if "cases" in cfg.raw:
        cases = cfg.raw["cases"]
        if not isinstance(cases, list) or not cases:
            raise ValidationError("cases must be a non-empty list")
        return cases
    return [{"system": cfg.require("system"), "t": float(t),
             "theta_star": cfg.get("theta_star", -0.25), "x": cfg.get("x")}
            for t in time_list(cfg.require("times"))]


def run_feller(cfg, cat, threads) -> Outcome:
    out = Outcome()
    rows = []
    deltas = cfg.get("deltas", (1e-1, 1e-2, 1e-3, 1e-4, 1e-5))
    for case in _feller_cases(cfg):
        sys, pf = build_system(case.get("system", cfg.get("system")), cat)
        x = build_segment(case.get("x", cfg.get("x")), sys)
        t = float(case["t"])
        rep = strong_feller_failure_probe(sys, t, float(case.get("theta_star", -0.25)), x,
                                          deltas=deltas)
        key = case.get("label", f"t={t:g},d={sys.d:g}")
        for dl, a, b in zip(rep.deltas, rep.tail_ratio, rep.control_ratio):
            rows.append([key, t, sys.d, dl, a, b])
        growth = rep.growth_at(1e-3)
        out.summary[key] = {"growth_at_1e-3": growth, "tail_spread": rep.tail_spread,
                            "tail_bounded": rep.tail_bounded,
                            "control_bounded": rep.control_bounded,
                            "deterministic_coordinate": rep.deterministic_coordinate}
        if rep.deterministic_coordinate:
            out.checks[key] = bool(abs(growth) >= 1e2 and rep.control_bounded)
        else:
            out.checks[key] = bool(rep.tail_bounded and rep.control_bounded)
    out.tables["feller"] = (["case", "t", "d", "delta", "tail_ratio", "control_ratio"], rows)
    return out


def _solver_config(cfg: RunConfig, T: float) -> SolverConfig:
    s = dict(cfg.get("solver", {}))
    s.pop("T", None)
    return SolverConfig(T=T, **s)


def _grid_tables(w, out: Outcome) -> None:
    pts = w.grid.points
    n = w.n
    ycols = [f"y{i}" for i in range(n)]
    rows_w, rows_g = [], []
    for k, t in enumerate(w.times):
        for j in range(pts.shape[0]):
            rows_w.append([t] + list(pts[j]) + [w.wbar[k, j]])
            rows_g.append([t] + list(pts[j]) + list(w.gbarG[k, j]))
    out.tables["wbar"] = (["t"] + ycols + ["wbar"], rows_w)
    out.tables["gbarG"] = (["t"] + ycols + [f"gbarG{i}" for i in range(n)], rows_g)


def _picard_summary(w) -> Dict:
    d = w.diagnostics
    return {"T0": d["T0"], "tbar": d["tbar"], "max_ratio": d["max_ratio"],
            "converged": d["converged"],
            "windows": [{"window": list(x["window"]), "iterations": x["iterations"],
                         "ratios": x["ratios"]} for x in d["windows"]],
            "sup_scaled_gradient": w.sup_scaled_gradient()}


def run_hjb(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    phibar = _observable(cfg, cat, sys)
    psi = build_named(cat, "psi", cfg.require("psi"))
    w = picard_solve(sys, pf, phibar, psi, _solver_config(cfg, float(cfg.require("T"))))
    out = Outcome()
    _grid_tables(w, out)
    out.summary = _picard_summary(w)
    out.checks["converged"] = bool(w.diagnostics["converged"])
    out.checks["contraction"] = bool(w.diagnostics["max_ratio"] < 1.0)
    return out


def run_linear(cfg, cat, threads) -> Outcome:
    sys, pf = build_system(cfg.require("system"), cat)
    phibar = _observable(cfg, cat, sys)
    drift = cfg.get("drift")
    drift = None if drift is None else build_named(cat, "drifts", drift, pf=pf)
    T = float(cfg.require("T"))
    mc = _mc(cfg, threads)
    rows = []
    flagged = False
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, p in enumerate(cfg.require("probes")):
            x = build_segment(p.get("x"), sys)
            est = linear_solve(sys, pf, drift, phibar, float(p.get("t", 0.0)), x, T, mc)
            g = getattr(est, "girsanov", est)
            d = getattr(est, "direct", est)
            f = bool(getattr(est, "flagged", False))
            flagged |= f
            rows.append([i, p.get("t", 0.0), d.value, d.se, g.value, g.se, f])
    out = Outcome()
    out.tables["linear"] = (["probe", "t", "direct", "direct_se", "reweighted", "reweighted_se",
                             "flagged"], rows)
    out.summary = {"paths": mc.paths, "seed": mc.seed, "any_flagged": flagged}
    out.checks["estimators_agree"] = not flagged
    return out


def run_control(cfg, cat, threads) -> Outcome:
    prob_spec = cfg.require("problem")
    problem = build_named(cat, "problems", prob_spec)
    w = problem.solve(_solver_config(cfg, problem.horizon))
    policy = ctl.FeedbackPolicy(problem, w)
    cands = {f"constant {u:g}": np.array([float(u)] * problem.sys.n)
             for u in cfg.get("constants", [-1.0, -0.5, 0.0, 0.5, 1.0])}
    rep = ctl.verify_fundamental_relation(problem, policy, cands, float(cfg.get("dt", 0.01)),
                                          int(cfg.get("paths", 10000)), int(cfg.get("seed", 0)),
                                          threads)
    out = Outcome()
    out.tables["verification"] = (["control", "J", "se", "J_minus_v", "ok"],
                                  [[r.name, r.J, r.se, r.gap, r.ok] for r in rep.rows])
    out.summary = {"v": rep.v, "slack": rep.slack, "feedback_ok": rep.feedback_ok,
                   "result": "PASS" if rep.passed else "FAIL", "picard": _picard_summary(w)}
    out.checks["fundamental_relation"] = rep.passed
    return out


RUNNERS: Dict[str, Callable] = {
    "simulate": run_simulate, "covariance": run_covariance,
    "smoothing-rate": run_smoothing_rate, "gradient-rate": run_gradient_rate,
    "feller-probe": run_feller, "hjb-solve": run_hjb, "linear-solve": run_linear,
    "control": run_control,
}
assert set(RUNNERS) == set(EXPERIMENTS)


def run(config_path, out_dir, threads: int = 1, catalog: Optional[Catalog] = None) -> int:
    """Run one config; returns the process exit status."""
    cat = Catalog.default() if catalog is None else catalog
    try:
        cfg = load_config(config_path)
        outcome = RUNNERS[cfg.experiment](cfg, cat, threads)
    except NonContractionError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_CHECK
    except (DelaySmoothError, ValueError) as exc:
        print(f"validation error: {exc}", file=_sys.stderr)
        return EXIT_INVALID
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in outcome.tables.items():
        _write_csv(out / f"{name}.csv", table)
    summary = {"experiment": cfg.experiment, "config_sha256": cfg.digest(),
               "checks": outcome.checks, "result": "PASS" if outcome.ok else "FAIL",
               **{k: v for k, v in outcome.summary.items() if k != "result"}}
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    (out / "resolved_config.json").write_text(
        json.dumps(_jsonable(cfg.resolved()), indent=2, sort_keys=True))
    return EXIT_OK if outcome.ok else EXIT_CHECK


def list_catalog(catalog: Optional[Catalog] = None) -> List[str]:
    cat = Catalog.default() if catalog is None else catalog
    return cat.listing()


def shipped_configs() -> Dict[str, Path]:
    root = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(root.glob("*.yaml"))}


def main(argv: Optional[Sequence[str]] = None, catalog: Optional[Catalog] = None) -> int:
    ap = argparse.ArgumentParser(prog="delaysmooth", description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", help="config path or name of a shipped config")
    ap.add_argument("--config", dest="config_opt", help="path to a YAML run config")
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="worker threads (results invariant)")
    ap.add_argument("--list", action="store_true", help="list catalog entries and shipped configs")
    args = ap.parse_args(argv)
    if args.list:
        for line in list_catalog(catalog):
            print(line)
        if catalog is None or catalog.listing():
            for name in shipped_configs():
                print(f"configs: {name}")
        return EXIT_OK
    path = args.config_opt or args.config
    if path is None:
        ap.print_usage(_sys.stderr)
        print("error: a config is required unless --list is given", file=_sys.stderr)
        return EXIT_INVALID
    if not Path(path).exists() and path in shipped_configs():
        path = shipped_configs()[path]
    if args.threads < 1:
        print("validation error: --threads must be positive", file=_sys.stderr)
        return EXIT_INVALID
    return run(path, args.out, args.threads, catalog)


if __name__ == "__main__":
    raise SystemExit(main())
