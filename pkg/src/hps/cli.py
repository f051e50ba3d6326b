"""Command-line front end: ``hps <command> --config run.json --out DIR``.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.  Errors
are printed to stderr as one JSON object.  Every output file is written to
a temporary name and moved into place.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
import time

import jsonschema

COMMANDS = ("solve", "converge", "plan-report", "adaptive-report", "invert", "dump-mesh")
CSV_VERSION = 1

_INT = {"type": "integer", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seed": _INT,
        "problem": {
            "type": "object", "additionalProperties": False, "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "discretization": {
            "type": "object", "additionalProperties": False, "required": ["p"],
            "properties": {
                "p": {"type": "integer", "minimum": 4},
                "L": _INT,
                "adaptive": {
                    "type": "object", "additionalProperties": False, "required": ["tol"],
                    "properties": {"tol": _POS, "max_depth": _INT},
                },
            },
        },
        "sweep": {
            "type": "object", "additionalProperties": False, "required": ["p", "L"],
            "properties": {
                "p": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
                "L": {"type": "array", "items": _INT, "minItems": 1},
            },
        },
        "adaptive": {
            "type": "object", "additionalProperties": False, "required": ["p", "tol"],
            "properties": {
                "p": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
                "tol": {"type": "array", "items": _POS},
                "max_depth": _INT,
                "uniform_L": {"type": "array", "items": _INT},
                "solve": {"type": "boolean"},
            },
        },
        "planner": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "strategies": {"type": "array", "items": {"enum": ["none", "leaf", "subtree"]},
                               "minItems": 1},
                "device_bytes": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "subtree_depths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "L": {"type": "array", "items": _INT, "minItems": 1},
                "p": {"type": "integer", "minimum": 4},
                "execute": {"type": "boolean"},
            },
        },
        "inverse": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "gamma": _POS, "k": _POS,
                "p": {"type": "integer", "minimum": 4}, "L": _INT,
                "receivers": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"n": {"type": "integer", "minimum": 1},
                                   "radius": _POS, "sigma": _POS},
                },
                "seed": _INT,
                "max_iters": _INT,
                "warm_modes": _INT,
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "prefix": {"type": "string"}},
        },
    },
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and output helpers
# ---------------------------------------------------------------------------

def validate_config(cfg, command):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    if cfg.get("command", command) != command:
        raise ConfigError(f"config is for command {cfg['command']!r}, not {command!r}")
    need = {"solve": ["problem", "discretization"], "converge": ["problem", "sweep"],
            "adaptive-report": ["problem", "adaptive"], "dump-mesh": ["problem", "discretization"],
            "plan-report": [], "invert": []}[command]
    for key in need:
        if key not in cfg:
            raise ConfigError(f"command {command!r} needs the {key!r} section")
    disc = cfg.get("discretization")
    if disc is not None and ("L" in disc) == ("adaptive" in disc):
        raise ConfigError("discretization needs exactly one of 'L' or 'adaptive'")
    if "problem" in cfg:
        from .problems import PROBLEMS
        if cfg["problem"]["name"] not in PROBLEMS:
            raise ConfigError(f"problem/name: unknown problem {cfg['problem']['name']!r}; "
                              f"choose from {sorted(PROBLEMS)}")
    return cfg


def _write(path, data):
    from .downpass import _atomic_write
    _atomic_write(path, data.encode() if isinstance(data, str) else data)


def _csv_text(name, columns, rows):
    buf = io.StringIO()
    buf.write(f"# hps {name} v{CSV_VERSION}: {','.join(columns)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6e}"
    return str(v)


def _out_path(args, cfg, name):
    prefix = cfg.get("output", {}).get("prefix", "")
    return os.path.join(args.out, prefix + name)


def _problem(cfg, seed):
    from .problems import make_problem
    spec = cfg["problem"]
    params = dict(spec.get("params", {}))
    if seed is not None and "seed" not in params and spec["name"] in (
            "scatter2d", "poisson_boltzmann3d"):
        params["seed"] = seed
    try:
        return make_problem(spec["name"], **params)
    except TypeError as exc:
        raise ConfigError(f"problem/params: {exc}") from None


def _tree(problem, disc):
    from .mesh import RefinementCriterion, build_uniform_tree, refine_adaptive
    p = disc["p"]
    if "L" in disc:
        return build_uniform_tree(problem.domain, disc["L"], p=p)
    if problem.dim != 3:
        raise ConfigError("adaptive discretization needs a 3D problem")
    ad = disc["adaptive"]
    crit = RefinementCriterion(tol=ad["tol"], p=p, test_fields=problem.refine_fields)
    kw = {"max_depth": ad["max_depth"]} if "max_depth" in ad else {}
    return refine_adaptive(problem.domain, crit, **kw)


def _solve(tree, problem):
    from .solver import HPSSolver
    s = HPSSolver(tree, problem)
    if tree.dim == 3:
        return s.solve_once(recompute=tree.n_leaves > 512)
    return s.solve()


def _rel_error(u, tree, problem):
    from .problems import error_report
    from .solver import exact_on_tree
    if problem.exact is None:
        return None
    return error_report(u.values, exact_on_tree(tree, problem.exact))["rel_Linf"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(cfg, args):
    from .merge import top_D_size
    problem = _problem(cfg, args.seed)
    t0 = time.perf_counter()
    tree = _tree(problem, cfg["discretization"])
    u = _solve(tree, problem)
    secs = time.perf_counter() - t0
    report = {"problem": problem.name, "p": tree.p, "n_leaves": tree.n_leaves, "N": tree.N,
              "max_depth": tree.depth, "top_D_size": top_D_size(tree),
              "rel_Linf": _rel_error(u, tree, problem), "seconds": secs}
    base = _out_path(args, cfg, "solution")
    _write(_out_path(args, cfg, "tree.json"), tree.to_json())
    u.dump(base, tree_ref=os.path.basename(_out_path(args, cfg, "tree.json")))
    _write(_out_path(args, cfg, "report.json"), json.dumps(report, indent=1))
    print(json.dumps(report))
    return 0


def _fit_slope(hs, errs):
    import numpy as np
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def cmd_converge(cfg, args):
    from .mesh import build_uniform_tree
    problem = _problem(cfg, args.seed)
    if problem.exact is None:
        raise ConfigError("problem/name: convergence studies need a manufactured solution")
    rows = []
    for p in cfg["sweep"]["p"]:
        for L in cfg["sweep"]["L"]:
            t0 = time.perf_counter()
            tree = build_uniform_tree(problem.domain, L, p=p)
            u = _solve(tree, problem)
            err = _rel_error(u, tree, problem)
            rows.append({"p": p, "L": L, "h": problem.domain.side / 2 ** L, "N": tree.N,
                         "rel_Linf": err, "seconds": time.perf_counter() - t0})
    cols = ["p", "L", "h", "N", "rel_Linf", "seconds"]
    _write(_out_path(args, cfg, "converge.csv"), _csv_text("converge", cols, rows))
    slopes = {}
    for p in cfg["sweep"]["p"]:
        r = [x for x in rows if x["p"] == p and x["rel_Linf"] > 0]
        if len(r) >= 2:
            slopes[str(p)] = _fit_slope([x["h"] for x in r], [x["rel_Linf"] for x in r])
    print(json.dumps({"rows": len(rows), "slopes": slopes}))
    return 0


def _solution_hash(values):
    import numpy as np
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()[:16]


def cmd_plan_report(cfg, args):
    import math

    from .mesh import build_uniform_tree
    from .planner import ArenaBudget, UniformShape, dry_run, execute, ledger_report, make_plan
    pc = cfg.get("planner", {})
    strategies = pc.get("strategies", ["none", "leaf", "subtree"])
    cap = pc.get("device_bytes")
    budget = ArenaBudget(math.inf if cap is None else float(cap))
    p = pc.get("p", 16)
    run = pc.get("execute", False)
    problem = _problem(cfg, args.seed) if run else None
    if problem is not None and problem.dim != 2:
        raise ConfigError("problem/name: the planner report is two-dimensional")
    variant = problem.variant if problem is not None else "dtn"
    rows = []
    for L in pc.get("L", [6]):
        jobs = []
        for strat in strategies:
            if strat == "subtree" and pc.get("subtree_depths"):
                jobs += [(strat, s) for s in pc["subtree_depths"] if s <= L]
            else:
                jobs.append((strat, None))
        if run:
            tree = build_uniform_tree(problem.domain, L, p=p)
        else:
            tree = UniformShape(2, L, p, variant=variant, is_complex=variant == "iti")
        for strat, s in jobs:
            plan = make_plan(tree, strat, budget, problem=problem, subtree_depth=s)
            t0 = time.perf_counter()
            if run:
                u, ledger = execute(plan, tree, problem)
                digest = _solution_hash(u.values)
            else:
                ledger, digest = dry_run(plan, tree), None
            rec = ledger_report(ledger, plan)
            rows.append({"strategy": strat, "subtree_depth": plan.subtree_depth, "L": L,
                         "N": rec["N"], "bytes_in": rec["bytes_in"],
                         "bytes_out": rec["bytes_out"],
                         "recomputed_flops": rec["recomputed_flops"],
                         "seconds": time.perf_counter() - t0, "solution_hash": digest})
    cols = ["strategy", "subtree_depth", "L", "N", "bytes_in", "bytes_out",
            "recomputed_flops", "seconds", "solution_hash"]
    _write(_out_path(args, cfg, "plan_report.csv"), _csv_text("plan-report", cols, rows))
    print(json.dumps({"rows": len(rows)}))
    return 0


def cmd_adaptive_report(cfg, args):
    from .mesh import RefinementCriterion, build_uniform_tree, refine_adaptive
    from .merge import top_D_size
    problem = _problem(cfg, args.seed)
    if problem.dim != 3:
        raise ConfigError("problem/name: the adaptive report needs a 3D problem")
    ac = cfg["adaptive"]
    do_solve = ac.get("solve", True)
    kw = {"max_depth": ac["max_depth"]} if "max_depth" in ac else {}
    rows = []

    def row(tree, tol, t0):
        err = _rel_error(_solve(tree, problem), tree, problem) if do_solve else None
        rows.append({"tol": tol, "p": tree.p, "n_leaves": tree.n_leaves, "N": tree.N,
                     "max_depth": tree.depth, "top_D_size": top_D_size(tree),
                     "rel_error": err, "seconds": time.perf_counter() - t0})

    for p in ac["p"]:
        for L in ac.get("uniform_L", []):
            t0 = time.perf_counter()
            row(build_uniform_tree(problem.domain, L, p=p), "uniform", t0)
        for tol in ac["tol"]:
            t0 = time.perf_counter()
            crit = RefinementCriterion(tol=tol, p=p, test_fields=problem.refine_fields)
            row(refine_adaptive(problem.domain, crit, **kw), tol, t0)
    cols = ["tol", "p", "n_leaves", "N", "max_depth", "top_D_size", "rel_error", "seconds"]
    _write(_out_path(args, cfg, "adaptive_report.csv"),
           _csv_text("adaptive-report", cols, rows))
    print(json.dumps({"rows": len(rows)}))
    return 0


def cmd_invert(cfg, args):
    import numpy as np

    from .frechet import gauss_newton, history_csv, make_inverse_problem, warm_start
    ic = cfg.get("inverse", {})
    rc = ic.get("receivers", {})
    seed = args.seed if args.seed is not None else ic.get("seed", cfg.get("seed", 0))
    ip = make_inverse_problem(gamma=ic.get("gamma", 5.0), k=ic.get("k", 20.0),
                              p=ic.get("p", 16), L=ic.get("L", 3),
                              n_receivers=rc.get("n", 100), radius=rc.get("radius", 0.8),
                              sigma=rc.get("sigma", 0.05), seed=seed)
    theta0 = warm_start(ip, ic.get("warm_modes", 3))
    theta, hist = gauss_newton(ip, theta0, max_iters=ic.get("max_iters", 25))
    head = (f"hps invert v{CSV_VERSION}: gamma={ip.basis.gamma} k={ip.k} p={ip.p} L={ip.L} "
            f"receivers={len(ip.receivers)} seed={seed} data_norm={np.linalg.norm(ip.data):.6e}")
    _write(_out_path(args, cfg, "invert.csv"), history_csv(hist, head))
    final = {"theta": theta.tolist(), "theta_star": ip.theta_star.tolist(),
             "modes": ip.basis.modes, "residual": hist[-1].residual,
             "relative_residual": hist[-1].residual / float(np.linalg.norm(ip.data)),
             "iterations": hist[-1].iteration}
    _write(_out_path(args, cfg, "theta.json"), json.dumps(final, indent=1))
    print(json.dumps({k: final[k] for k in ("relative_residual", "iterations")}))
    return 0


def cmd_dump_mesh(cfg, args):
    from .mesh import level_restriction_violations
    from .merge import top_D_size
    problem = _problem(cfg, args.seed)
    tree = _tree(problem, cfg["discretization"])
    _write(_out_path(args, cfg, "tree.json"), tree.to_json())
    summary = {"n_leaves": tree.n_leaves, "N": tree.N, "max_depth": tree.depth,
               "top_D_size": top_D_size(tree),
               "level_restriction_violations": len(level_restriction_violations(tree))}
    print(json.dumps(summary))
    return 0


HANDLERS = {"solve": cmd_solve, "converge": cmd_converge, "plan-report": cmd_plan_report,
            "adaptive-report": cmd_adaptive_report, "invert": cmd_invert,
            "dump-mesh": cmd_dump_mesh}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="hps", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS threads (takes effect when set before numpy loads)")
    return ap


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(2, "config", f"cannot read config: {exc}")
    try:
        cfg = validate_config(copy.deepcopy(cfg), args.command)
        if args.seed is None:
            args.seed = cfg.get("seed")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be non-negative")
        os.makedirs(args.out, exist_ok=True)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(2, "config", str(exc))
    except Exception as exc:  # numerical or solver failure
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
