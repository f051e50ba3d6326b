"""Adaptive 3D solve of the Poisson-Boltzmann model with the vdW permittivity.

Shows how the tree grows as the refinement tolerance tightens and how the
solution settles on a fixed probe grid.
"""
import warnings

import numpy as np

from hps.merge import top_D_size
from hps.mesh import RefinementCriterion, RefinementWarning, refine_adaptive
from hps.problems import PoissonBoltzmannSpec, make_poisson_boltzmann
from hps.solver import HPSSolver

pr = make_poisson_boltzmann(PoissonBoltzmannSpec(permittivity="vdw"))
g = np.linspace(-0.9, 0.9, 12)
probe = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
prev = None
for tol in (1e-1, 1e-2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RefinementWarning)
        tree = refine_adaptive(pr.domain, RefinementCriterion(tol, 8, list(pr.refine_fields)),
                               max_depth=6)
    u = HPSSolver(tree, pr).solve_once().evaluate_at(probe)
    msg = f"tol={tol:g} leaves={tree.n_leaves} depth={tree.depth} top D={top_D_size(tree)}"
    if prev is not None:
        msg += f" probe change {np.abs(u - prev).max():.2e}"
    print(msg)
    prev = u
