"""h-convergence of the 2D solver on the two manufactured problems.

Prints rel_Linf per level and the observed order between successive levels.
The rate should approach p - 2 until round-off takes over.
"""
import numpy as np

from hps.mesh import build_uniform_tree
from hps.problems import error_report, make_manufactured_2d_dtn, make_manufactured_2d_iti
from hps.solver import HPSSolver, exact_on_tree

for name, make in (("DtN", make_manufactured_2d_dtn), ("ItI", make_manufactured_2d_iti)):
    pr = make()
    for p in (8, 12):
        errs = []
        for L in range(1, 5):
            tree = build_uniform_tree(pr.domain, L, p=p)
            u = HPSSolver(tree, pr).solve()
            errs.append(error_report(u.values, exact_on_tree(tree, pr.exact))["rel_Linf"])
        rates = -np.diff(np.log2(errs))
        print(f"{name} p={p:2d} errors", " ".join(f"{e:.2e}" for e in errs),
              "| rates", " ".join(f"{r:.1f}" for r in rates))
