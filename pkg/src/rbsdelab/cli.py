"""Command-line experiment runner.

    rbsdelab run CONFIG [--out-dir DIR] [--jobs N] [--validate-only]
    rbsdelab --list-tasks

Exit codes: 0 success, 2 configuration error, 3 a hard check failed.
The report directory can be overridden with ``RBSDELAB_REPORT_DIR``;
``--out-dir`` takes precedence over it.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import estimates as est
from .horizon import GProcess, HorizonError, RandomTimeModel, build_azema, build_gtree
from .lattice import FiltrationTree, LatticeError, TreeProcess, is_martingale
from .fixtures import (MODEL_NAMES, model_spec, random_linear_data, random_lipschitz_data,
                       random_process, sin_plus_z_driver)
from .rbsde import (Driver, LipschitzViolation, NoConvergence, RBSDEData, RBSDEError,
                    check_g_solution, g_dynamics_residual, horizon_truncation_study, make_f_data,
                    skorokhod_check, solve_general, solve_linear_F, solve_linear_G, transform_F2G)
from .snell import brute_force_snell, snell, transfer_snell_P, transfer_snell_Q

EXIT_OK, EXIT_CONFIG, EXIT_TASK = 0, 2, 3
ENV_REPORT_DIR = "RBSDELAB_REPORT_DIR"

TASKS = {
    "azema": "Azema supermartingales, Ztilde, Etilde and V^F of the random-time model",
    "snell-transfer": "transfer formulas for Snell envelopes under P and Qtilde on random payoffs",
    "rbsde-solve": "solve one RBSDE on the enlarged tree (linear solve or Picard)",
    "transform-check": "linear G-solver against the transform of the F-solver on random instances",
    "picard": "Picard iteration on G against the transform of Picard on F",
    "estimate-audit": "both sides of an a-priori estimate over random batches",
    "horizon-study": "weighted distances between solutions with truncated data",
    "oracle-check": "Snell recursion against exhaustive stopping-rule enumeration",
}


class ConfigError(ValueError):
    pass


class TaskFailure(RuntimeError):
    def __init__(self, failures: list):
        super().__init__(f"{len(failures)} check(s) failed")
        self.failures = failures


# ---------------------------------------------------------------------------
# config

_TOP = {"seed", "task", "grid", "model", "data", "params", "output", "jobs"}
_GRID = {"steps", "dt", "horizon"}
_MODEL = {"fixture", "model_kind", "parameters"}
_DATA = {"driver", "barrier", "terminal"}
_DRIVER = {"kind", "value", "c_y", "c_z", "lipschitz"}
_BARRIER = {"kind", "value", "prob"}
_TERMINAL = {"kind", "value", "scale"}
_PARAMS = {"p", "a", "alpha", "tol", "max_iter", "levels", "instances", "batches", "theorem",
           "c_lip", "measure"}
_OUTPUT = {"dir", "prefix"}


def _check_keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _number(x, where: str, low=None, high=None, integer=False, strict_low=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or (integer and not isinstance(x, int)):
        raise ConfigError(f"{where} must be {'an integer' if integer else 'a number'}")
    if not math.isfinite(x):
        raise ConfigError(f"{where} must be finite")
    if low is not None and (x <= low if strict_low else x < low):
        raise ConfigError(f"{where} must be {'>' if strict_low else '>='} {low}")
    if high is not None and x > high:
        raise ConfigError(f"{where} must be <= {high}")
    return x


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return validate_config(cfg)


def validate_config(cfg) -> dict:
    """Check the schema and fill defaults; raises :class:`ConfigError`."""
    _check_keys(cfg, _TOP, "config")
    out = {"seed": 0, "jobs": 1, "params": {}, "output": {"dir": "reports", "prefix": ""}}
    out["seed"] = _number(cfg.get("seed", 0), "seed", 0, integer=True)
    out["jobs"] = _number(cfg.get("jobs", 1), "jobs", 1, 64, integer=True)
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {', '.join(TASKS)}")
    out["task"] = task

    grid = cfg.get("grid")
    if grid is None:
        raise ConfigError("grid is required")
    _check_keys(grid, _GRID, "grid")
    steps = _number(grid.get("steps"), "grid.steps", 1, 22, integer=True)
    if "dt" in grid and "horizon" in grid:
        raise ConfigError("give either grid.dt or grid.horizon")
    if "dt" in grid:
        dt = _number(grid["dt"], "grid.dt", 0, strict_low=True)
    else:
        dt = _number(grid.get("horizon", 1.0), "grid.horizon", 0, strict_low=True) / steps
    out["grid"] = {"steps": steps, "dt": float(dt)}

    model = cfg.get("model", {"fixture": "immersion"})
    _check_keys(model, _MODEL, "model")
    if "fixture" in model:
        if set(model) != {"fixture"}:
            raise ConfigError("model.fixture excludes model_kind and parameters")
        if model["fixture"] not in MODEL_NAMES:
            raise ConfigError(f"model.fixture must be one of {', '.join(MODEL_NAMES)}")
        out["model"] = model_spec(model["fixture"])
    else:
        if model.get("model_kind") not in ("independent", "adapted", "lookahead", "terminal", "survives"):
            raise ConfigError("model.model_kind is missing or unknown")
        params = model.get("parameters", {})
        if not isinstance(params, dict):
            raise ConfigError("model.parameters must be a mapping")
        out["model"] = {"model_kind": model["model_kind"], "parameters": dict(params)}

    data = cfg.get("data", {})
    _check_keys(data, _DATA, "data")
    drv = data.get("driver", {"kind": "linear", "value": 0.0})
    _check_keys(drv, _DRIVER, "data.driver")
    if drv.get("kind") not in ("linear", "sin_plus_z", "random"):
        raise ConfigError("data.driver.kind must be linear, sin_plus_z or random")
    for key in ("value", "c_y", "c_z"):
        if key in drv:
            _number(drv[key], f"data.driver.{key}")
    bar = data.get("barrier", {"kind": "none"})
    _check_keys(bar, _BARRIER, "data.barrier")
    if bar.get("kind") not in ("none", "constant", "random"):
        raise ConfigError("data.barrier.kind must be none, constant or random")
    if "prob" in bar:
        _number(bar["prob"], "data.barrier.prob", 0, 1)
    if "value" in bar:
        _number(bar["value"], "data.barrier.value")
    term = data.get("terminal", {"kind": "constant", "value": 0.0})
    _check_keys(term, _TERMINAL, "data.terminal")
    if term.get("kind") not in ("constant", "random", "brownian"):
        raise ConfigError("data.terminal.kind must be constant, random or brownian")
    for key in ("value", "scale"):
        if key in term:
            _number(term[key], f"data.terminal.{key}")
    out["data"] = {"driver": dict(drv), "barrier": dict(bar), "terminal": dict(term)}

    params = cfg.get("params", {})
    _check_keys(params, _PARAMS, "params")
    p = dict(params)
    if "p" in p:
        _number(p["p"], "params.p", 1, strict_low=True)
    if "a" in p:
        _number(p["a"], "params.a", 0, strict_low=True)
    if "tol" in p:
        _number(p["tol"], "params.tol", 0, strict_low=True)
    if "alpha" in p:
        _number(p["alpha"], "params.alpha", 0)
    if "c_lip" in p:
        _number(p["c_lip"], "params.c_lip", 0)
    for key in ("max_iter", "instances", "batches"):
        if key in p:
            _number(p[key], f"params.{key}", 1, integer=True)
    if "theorem" in p and p["theorem"] not in est.AUDIT_TAGS:
        raise ConfigError(f"params.theorem must be one of {', '.join(est.AUDIT_TAGS)}")
    if "measure" in p and p["measure"] not in ("P", "Q"):
        raise ConfigError("params.measure must be P or Q")
    if "levels" in p:
        lv = p["levels"]
        if not isinstance(lv, list) or not lv:
            raise ConfigError("params.levels must be a nonempty list")
        for x in lv:
            _number(x, "params.levels entry", 0, steps, integer=True)
        if sorted(lv) != lv or len(set(lv)) != len(lv):
            raise ConfigError("params.levels must be strictly increasing")
    out["params"] = p

    output = cfg.get("output", {})
    _check_keys(output, _OUTPUT, "output")
    out["output"] = {"dir": str(output.get("dir", "reports")), "prefix": str(output.get("prefix", ""))}

    # build the objects once so model- and data-level errors surface here
    try:
        setup(out)
    except (LatticeError, HorizonError, RBSDEError, ValueError) as exc:
        raise ConfigError(f"invalid model or data: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# building objects

def setup(cfg: dict):
    g = cfg["grid"]
    tree = FiltrationTree.symmetric(g["steps"], g["dt"])
    model = RandomTimeModel.from_spec(tree, cfg["model"])
    bundle = build_azema(model)
    return tree, model, bundle, build_gtree(model, bundle)


def build_data(cfg: dict, tree: FiltrationTree, rng: np.random.Generator) -> RBSDEData:
    n = tree.steps
    spec = cfg["data"]
    drv, bar, term = spec["driver"], spec["barrier"], spec["terminal"]
    if term["kind"] == "constant":
        h = TreeProcess([np.full(2 ** t, float(term.get("value", 0.0))) for t in range(n + 1)])
    elif term["kind"] == "brownian":
        h = tree.brownian() * float(term.get("scale", 1.0))
    else:
        h = random_process(tree, rng)
    if bar["kind"] == "none":
        S = TreeProcess([np.full(2 ** t, -np.inf) for t in range(n + 1)])
    elif bar["kind"] == "constant":
        S = TreeProcess([np.minimum(np.full(2 ** t, float(bar.get("value", 0.0))), h[t]) for t in range(n + 1)])
    else:
        prob = float(bar.get("prob", 0.5))
        S = TreeProcess([np.where(rng.random(2 ** t) < prob, np.minimum(h[t], rng.normal(size=2 ** t)), -np.inf)
                         for t in range(n + 1)])
    if drv["kind"] == "linear":
        driver = Driver.linear([np.full(2 ** t, float(drv.get("value", 0.0))) for t in range(n)])
    elif drv["kind"] == "random":
        driver = Driver.linear([rng.normal(size=2 ** t) for t in range(n)])
    else:
        driver = sin_plus_z_driver(tree, float(drv.get("c_y", 0.5)), float(drv.get("c_z", 0.5)))
        if "lipschitz" in drv and float(drv["lipschitz"]) < driver.lipschitz:
            raise ConfigError("declared lipschitz constant is below the driver's")
        driver.probe_lipschitz(n, np.random.default_rng(cfg["seed"]))
    return RBSDEData(driver, S, h)


# ---------------------------------------------------------------------------
# tasks; each returns (summary, csv header, csv rows, failures)

def _instance_rng(cfg: dict, i: int) -> np.random.Generator:
    return np.random.default_rng([cfg["seed"], i])


def _run_batch(fn, cfg: dict, count: int):
    """Evaluate ``fn(cfg, i)`` for ``i < count`` across the configured worker pool, in order."""
    jobs = min(cfg["jobs"], count)
    if jobs <= 1:
        return [fn(cfg, i) for i in range(count)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, [cfg] * count, range(count)))


def task_azema(cfg):
    tree, model, bundle, gtree = setup(cfg)
    rows = list(bundle.to_rows())
    n = tree.steps
    gap1 = max(float(np.max(np.abs(bundle.Etilde[t] - bundle.Ztilde[t] * bundle.G[t] / bundle.G0)))
               for t in range(n + 1))
    ok, dev = is_martingale(tree, bundle.m)
    failures = []
    if gap1 > 1e-12:
        failures.append({"check": "Etilde = Ztilde G / G0", "gap": gap1})
    if not ok:
        failures.append({"check": "m is a martingale", "gap": dev})
    summary = {"G0": bundle.G0, "identity_gap": gap1, "m_drift": dev,
               "Etilde_terminal_mean": float(np.dot(tree.path_prob(n), bundle.Etilde[n]))}
    return summary, ["step", "path", "G", "Gtilde", "DoF", "m", "Ztilde", "Etilde", "VF"], rows, failures


def _random_payoff(tree, rng):
    n = tree.steps
    xF = random_process(tree, rng)
    k = [np.empty(0)] + [rng.normal(size=2 ** t) for t in range(1, n + 1)]
    return xF, k


def _transfer_one(cfg, i):
    tree, model, bundle, gtree = setup(cfg)
    xF, k = _random_payoff(tree, _instance_rng(cfg, i))
    return (i, transfer_snell_P(xF, k, bundle, gtree).residual, transfer_snell_Q(xF, k, bundle, gtree).residual)


def task_snell_transfer(cfg):
    count = int(cfg["params"].get("instances", 10))
    tol = float(cfg["params"].get("tol", 1e-10))
    res = _run_batch(_transfer_one, cfg, count)
    failures = [{"instance": i, "residual_P": rp, "residual_Q": rq} for i, rp, rq in res if max(rp, rq) > tol]
    summary = {"instances": count, "max_residual_P": max(r[1] for r in res),
               "max_residual_Q": max(r[2] for r in res), "tol": tol}
    return summary, ["instance", "residual_P", "residual_Q"], res, failures


def task_rbsde_solve(cfg):
    tree, model, bundle, gtree = setup(cfg)
    data = build_data(cfg, tree, _instance_rng(cfg, 0))
    tol = float(cfg["params"].get("tol", 1e-10))
    failures = []
    if data.driver.is_linear:
        sol = solve_linear_G(data, gtree)
        residual = g_dynamics_residual(sol, gtree)[0]
        try:
            check_g_solution(sol, data, gtree)
        except RBSDEError as exc:
            failures.append({"check": "solution invariants", "detail": str(exc)})
    else:
        try:
            res = solve_general(data, "G", gtree, bundle, tol=tol, max_iter=int(cfg["params"].get("max_iter", 200)))
        except NoConvergence as exc:
            return {"converged": False, "trace": exc.trace}, None, [], [{"check": "convergence",
                                                                           "iterations": exc.max_iter}]
        sol, residual = res.solution, res.residual
        if residual > 10 * tol:
            failures.append({"check": "dynamics residual", "value": residual})
    sk = skorokhod_check(sol, data.barrier_S)
    if not sk.passed:
        failures.append({"check": "Skorokhod", "sum": sk.flat_off_sum, "min_gap": sk.min_gap, "min_dK": sk.min_dK})
    summary = {"root_Y": sol.root, "skorokhod_sum": sk.flat_off_sum, "dynamics_residual": residual,
               "iterations": sol.iterations}
    return summary, ["step", "path", "alive", "Y", "Z", "K", "M"], list(sol.rows()), failures


def _gdiff(a, b) -> float:
    z = max(float(np.max(np.abs(x - y))) for x, y in zip(a.Z.values, b.Z.values))
    return max(a.Y.max_abs_diff(b.Y), z, a.K.max_abs_diff(b.K), a.M.max_abs_diff(b.M))


def _transform_one(cfg, i):
    tree, model, bundle, gtree = setup(cfg)
    data = random_linear_data(tree, _instance_rng(cfg, i))
    g = solve_linear_G(data, gtree)
    g2 = transform_F2G(solve_linear_F(make_f_data(data, bundle), tree), data, bundle, gtree, check=False)
    sk = skorokhod_check(g, data.barrier_S)
    return (i, _gdiff(g, g2), sk.flat_off_sum, sk.min_dK)


def task_transform_check(cfg):
    count = int(cfg["params"].get("instances", 50))
    tol = float(cfg["params"].get("tol", 1e-10))
    res = _run_batch(_transform_one, cfg, count)
    failures = [{"instance": i, "difference": d, "skorokhod": s, "min_dK": k}
                for i, d, s, k in res if d > tol or s > 1e-10 or k < -1e-12]
    summary = {"instances": count, "max_difference": max(r[1] for r in res),
               "max_skorokhod": max(r[2] for r in res), "min_dK": min(r[3] for r in res)}
    return summary, ["instance", "difference", "skorokhod_sum", "min_dK"], res, failures


def _picard_one(cfg, i):
    tree, model, bundle, gtree = setup(cfg)
    c_lip = float(cfg["params"].get("c_lip", 0.5)) / tree.grid.horizon
    tol = float(cfg["params"].get("tol", 1e-10))
    max_iter = int(cfg["params"].get("max_iter", 200))
    data = random_lipschitz_data(tree, _instance_rng(cfg, i), c_lip)
    try:
        rG = solve_general(data, "G", gtree, bundle, tol=tol, max_iter=max_iter)
        rF = solve_general(data, "F", tree, bundle, tol=tol, max_iter=max_iter)
    except NoConvergence as exc:
        return (i, math.inf, exc.max_iter, math.inf, math.inf)
    g2 = transform_F2G(rF.solution, data, bundle, gtree, check=False)
    ratios = rG.ratios()[3:]
    tail = max(ratios) if ratios else 0.0
    return (i, _gdiff(rG.solution, g2), rG.iterations, tail, rG.residual)


def task_picard(cfg):
    count = int(cfg["params"].get("instances", 20))
    res = _run_batch(_picard_one, cfg, count)
    tol = float(cfg["params"].get("tol", 1e-10))
    failures = [{"instance": i, "difference": d, "tail_ratio": q, "residual": r}
                for i, d, it, q, r in res if not (d <= 1e-8 and q <= 0.9 and r <= 10 * tol)]
    summary = {"instances": count, "max_difference": max(r[1] for r in res),
               "max_iterations": max(r[2] for r in res), "max_tail_ratio": max(r[3] for r in res)}
    return summary, ["instance", "difference", "iterations", "tail_ratio", "residual"], res, failures


def _audit_instance(tag, tree, gtree, rng):
    if tag in ("T4.1", "T5.2"):
        return random_linear_data(tree, rng)
    if tag == "T4.2":
        return random_linear_data(tree, rng, 1.0), random_linear_data(tree, rng, 1.0)
    if tag == "L5.1b":
        return est.random_nondecreasing(gtree, rng)
    return est.random_nonnegative(gtree, rng)


def _audit_batch(cfg, b):
    tree, model, bundle, gtree = setup(cfg)
    prm = cfg["params"]
    tag = prm.get("theorem", "T4.1")
    count = int(prm.get("instances", 100))
    insts = [_audit_instance(tag, tree, gtree, np.random.default_rng([cfg["seed"], b, i])) for i in range(count)]
    constants = est.EstimateConstants(p=float(prm.get("p", 2.0)))
    try:
        rep = est.audit_estimate(tag, insts, gtree, constants, a=float(prm.get("a", 1.0)))
    except est.ExplicitConstantViolated as exc:
        return b, None, {"batch": b, "instance": exc.instance, "lhs": exc.lhs, "rhs": exc.rhs}
    return b, rep, None


def task_estimate_audit(cfg):
    batches = int(cfg["params"].get("batches", 2))
    res = _run_batch(_audit_batch, cfg, batches)
    failures = [v for _, _, v in res if v is not None]
    reps = [(b, r) for b, r, _ in res if r is not None]
    rows = [(b, i, r.tag, lhs, rhs, ratio, int(ok)) for b, r in reps for i, lhs, rhs, ratio, ok in r.rows]
    maxes = [r.max_ratio for _, r in reps]
    summary = {"theorem": cfg["params"].get("theorem", "T4.1"), "batches": batches, "batch_max_ratio": maxes,
               "violations": failures}
    if maxes and not all(math.isfinite(x) for x in maxes):
        failures.append({"check": "finite ratio"})
    if len(maxes) >= 2 and min(maxes) > 0:
        spread = max(maxes) / min(maxes) - 1.0
        summary["ratio_spread"] = spread
        if not summary["theorem"].startswith("L5.1") and spread > 0.2:
            failures.append({"check": "ratio stability", "spread": spread})
    return summary, ["batch", "instance", "theorem", "lhs", "rhs", "ratio", "pass"], rows, failures


def task_horizon_study(cfg):
    tree, model, bundle, gtree = setup(cfg)
    data = build_data(cfg, tree, _instance_rng(cfg, 0))
    prm = cfg["params"]
    levels = prm.get("levels", [tree.steps // 2, tree.steps])
    p = float(prm.get("p", 2.0))
    rep = horizon_truncation_study(data, gtree, levels, p)
    summary = {"levels": rep.levels, "distances": rep.distances, "decreasing": rep.decreasing,
               "roots": rep.roots, "admissibility": est.admissibility(data, bundle, p)}
    rows = [(a, b, d, y, z) for a, b, d, y, z in zip(rep.levels, rep.levels[1:], rep.distances,
                                                     rep.y_distances, rep.z_distances)]
    failures = [] if rep.decreasing else [{"check": "decreasing distances", "distances": rep.distances}]
    return summary, ["level", "next_level", "distance", "y_distance", "z_distance"], rows, failures


def _oracle_one(cfg, i):
    tree, model, bundle, gtree = setup(cfg)
    xF, k = _random_payoff(tree, _instance_rng(cfg, i))
    measure = cfg["params"].get("measure", "P")
    out = [i]
    if tree.steps <= 4:
        out.append(abs(snell(xF, tree).root - brute_force_snell(xF, tree)))
    else:
        out.append(math.nan)
    if tree.steps <= 3:
        gp = GProcess(xF, k)
        out.append(abs(snell(gp, gtree, measure).root - brute_force_snell(gp, gtree, measure)))
    else:
        out.append(math.nan)
    return tuple(out)


def task_oracle_check(cfg):
    if cfg["grid"]["steps"] > 4:
        raise ConfigError("oracle-check needs grid.steps <= 4")
    count = int(cfg["params"].get("instances", 20))
    res = _run_batch(_oracle_one, cfg, count)
    failures = [{"instance": i, "F_gap": f, "G_gap": g} for i, f, g in res
                if f > 1e-12 or (not math.isnan(g) and g > 1e-12)]
    summary = {"instances": count, "max_F_gap": max(r[1] for r in res),
               "max_G_gap": max((r[2] for r in res if not math.isnan(r[2])), default=None)}
    return summary, ["instance", "F_gap", "G_gap"], res, failures


RUNNERS = {
    "azema": task_azema,
    "snell-transfer": task_snell_transfer,
    "rbsde-solve": task_rbsde_solve,
    "transform-check": task_transform_check,
    "picard": task_picard,
    "estimate-audit": task_estimate_audit,
    "horizon-study": task_horizon_study,
    "oracle-check": task_oracle_check,
}


# ---------------------------------------------------------------------------
# output

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def write_reports(out_dir: Path, prefix: str, task: str, payload: dict, header, rows):
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{prefix}{task}"
    (out_dir / f"{stem}.json").write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")
    if header is not None:
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])


def run(cfg: dict, out_dir: Path) -> None:
    """Execute the task and write its reports; raises :class:`TaskFailure` on a failed check."""
    summary, header, rows, failures = RUNNERS[cfg["task"]](cfg)
    payload = {"task": cfg["task"], "seed": cfg["seed"], "summary": summary, "failures": failures,
               "passed": not failures}
    write_reports(out_dir, cfg["output"]["prefix"], cfg["task"], payload, header, rows)
    if failures:
        raise TaskFailure(failures)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rbsdelab", description="Reflected BSDEs with a random horizon on trees")
    ap.add_argument("--list-tasks", action="store_true", help="list available tasks and exit")
    sub = ap.add_subparsers(dest="command")
    rp = sub.add_parser("run", help="run the task described by a YAML config")
    rp.add_argument("config")
    rp.add_argument("--out-dir", help="report directory (overrides the config and the environment)")
    rp.add_argument("--jobs", type=int, help="worker processes for batch tasks")
    rp.add_argument("--validate-only", action="store_true", help="check the config and exit")
    args = ap.parse_args(argv)

    if args.list_tasks:
        for name, what in TASKS.items():
            print(f"{name:16s} {what}")
        return EXIT_OK
    if args.command != "run":
        ap.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.jobs is not None:
            cfg["jobs"] = _number(args.jobs, "--jobs", 1, 64, integer=True)
        if cfg["task"] == "oracle-check" and cfg["grid"]["steps"] > 4:
            raise ConfigError("oracle-check needs grid.steps <= 4")
        if cfg["task"] == "horizon-study" and cfg["data"]["driver"]["kind"] == "sin_plus_z":
            raise ConfigError("horizon-study needs a linear driver")
        if cfg["task"] in ("rbsde-solve", "horizon-study"):
            build_data(cfg, FiltrationTree.symmetric(cfg["grid"]["steps"], cfg["grid"]["dt"]),
                       _instance_rng(cfg, 0))
    except (ConfigError, LipschitzViolation, RBSDEError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    out_dir = Path(args.out_dir or os.environ.get(ENV_REPORT_DIR) or cfg["output"]["dir"])
    try:
        run(cfg, out_dir)
    except TaskFailure as exc:
        print(json.dumps(_jsonable({"failures": exc.failures}), sort_keys=True), file=sys.stderr)
        return EXIT_TASK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
