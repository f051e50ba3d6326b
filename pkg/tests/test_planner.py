import json
import math

import numpy as np
import pytest

from hps.mesh import Box, build_uniform_tree
from hps.planner import (STRATEGIES, ArenaBudget, PlanError, UniformShape, dry_run, execute,
                         ledger_report, make_plan, report_csv, report_json)
from hps.problems import make_manufactured_2d_dtn, make_manufactured_2d_iti
from hps.solver import HPSSolver


@pytest.fixture(scope="module")
def case():
    pr = make_manufactured_2d_dtn()
    tree = build_uniform_tree(pr.domain, 4, p=8)
    return pr, tree, HPSSolver(tree, pr).solve().values


@pytest.mark.parametrize("strategy,kw", [("none", {}), ("leaf", {}), ("subtree", {}),
                                         ("subtree", {"subtree_depth": 2})])
@pytest.mark.parametrize("cap", [math.inf, 8e6])
def test_strategies_agree_with_direct_solve(case, strategy, kw, cap):
    pr, tree, ref = case
    plan = make_plan(tree, strategy, ArenaBudget(cap), problem=pr, **kw)
    u, led = execute(plan, tree, pr)
    assert np.abs(u.values - ref).max() <= 1e-13 * np.abs(ref).max()
    rep = ledger_report(led, plan)
    assert rep["peak_device_bytes"] <= cap
    if cap < math.inf:
        assert not plan.fused
    if strategy == "none":
        assert rep["recomputed_flops"] == 0


def test_iti_strategies_agree():
    pr = make_manufactured_2d_iti()
    tree = build_uniform_tree(pr.domain, 3, p=10)
    ref = HPSSolver(tree, pr).solve().values
    for strategy in STRATEGIES:
        plan = make_plan(tree, strategy, ArenaBudget(1e7), problem=pr)
        u, _ = execute(plan, tree, pr)
        assert np.abs(u.values - ref).max() <= 1e-13 * np.abs(ref).max()


def test_dry_run_matches_execute_bytes(case):
    pr, tree, _ = case
    shape = UniformShape(2, 4, 8, n_coeff_fields=len(pr.coeffs))
    for strategy in STRATEGIES:
        plan = make_plan(tree, strategy, ArenaBudget(8e6), problem=pr)
        _, led = execute(plan, tree, pr)
        dry = dry_run(make_plan(shape, strategy, ArenaBudget(8e6)), shape)
        assert led.bytes_in == dry.bytes_in and led.bytes_out == dry.bytes_out


def _bytes(shape, strategy, cap, **kw):
    plan = make_plan(shape, strategy, ArenaBudget(cap), **kw)
    return ledger_report(dry_run(plan, shape), plan)["bytes_total"]


def test_byte_ordering_large_tree():
    shape = UniformShape(2, 8, 16)
    b = {s: _bytes(shape, s, 20e9) for s in STRATEGIES}
    assert b["subtree"] < b["leaf"] < b["none"]


def test_subtree_depth_sweep_decreases():
    shape = UniformShape(2, 9, 16)
    b = [_bytes(shape, "subtree", 50e9, subtree_depth=s) for s in (5, 6, 7)]
    assert b[0] > b[1] > b[2]


def test_unbounded_budget_fuses():
    plan = make_plan(UniformShape(2, 6, 8), "subtree", ArenaBudget())
    assert plan.fused


def test_plan_errors():
    with pytest.raises(PlanError):
        make_plan(UniformShape(2, 4, 16), "leaf", ArenaBudget(1e3))
    with pytest.raises(PlanError):
        make_plan(UniformShape(3, 2, 8), "subtree", ArenaBudget(1e12))
    with pytest.raises(ValueError):
        make_plan(UniformShape(2, 4, 8), "bogus")


def test_reports_serialise():
    shape = UniformShape(2, 5, 8)
    plan = make_plan(shape, "leaf", ArenaBudget(7e7))
    rec = ledger_report(dry_run(plan, shape), plan)
    assert json.loads(report_json([rec]))[0]["strategy"] == "leaf"
    head, row = report_csv([rec]).splitlines()[:2]
    assert "strategy" in head.split(",") and "leaf" in row.split(",")
