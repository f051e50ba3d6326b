"""Transfer bytes of the three recomputation strategies under a fixed device budget.

Dry runs only: the byte ledger is computed from the plan without running
kernels, so large trees are cheap.  A small tree is executed for real to
show that every strategy returns the same solution.
"""
import numpy as np

from hps.mesh import build_uniform_tree
from hps.planner import (STRATEGIES, ArenaBudget, UniformShape, dry_run, execute,
                         ledger_report, make_plan)
from hps.problems import make_manufactured_2d_dtn
from hps.solver import HPSSolver

budget = ArenaBudget(device_capacity=20e9)
for L in (7, 8):
    shape = UniformShape(dim=2, L=L, p=16)
    for s in STRATEGIES:
        plan = make_plan(shape, s, budget)
        rep = ledger_report(dry_run(plan, shape), plan)
        print(f"L={L} {s:8s} batch={plan.batch_size} depth={plan.subtree_depth} "
              f"bytes={rep['bytes_total']:.3e} recomputed_flops={rep['recomputed_flops']:.3e}")

pr = make_manufactured_2d_dtn()
tree = build_uniform_tree(pr.domain, 4, p=12)
ref = HPSSolver(tree, pr).solve().values
for s in STRATEGIES:
    u, _ = execute(make_plan(tree, s, ArenaBudget(3e7), problem=pr), tree, pr)
    print(f"{s:8s} max difference from direct solve {np.abs(u.values - ref).max():.1e}")
