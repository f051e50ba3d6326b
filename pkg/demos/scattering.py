"""Plane wave scattering off a Gaussian bump, checked against a finer solve.

The reference uses one extra refinement level at p = 16.  Writes the real
part of the scattered field on a 200 x 200 grid to ``scattering.npy``.
"""
import numpy as np

from hps.mesh import build_uniform_tree
from hps.problems import make_scattering
from hps.solver import HPSSolver

k = 40.0
pr = make_scattering(k)
g = np.linspace(-0.99, 0.99, 200)
grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)

ref = HPSSolver(build_uniform_tree(pr.domain, 5, p=16), pr).solve().evaluate_at(grid)
for p, L in ((8, 4), (12, 4), (16, 4)):
    u = HPSSolver(build_uniform_tree(pr.domain, L, p=p), pr).solve().evaluate_at(grid)
    print(f"p={p:2d} L={L} rel_Linf vs reference {np.abs(u - ref).max() / np.abs(ref).max():.2e}")
np.save("scattering.npy", ref.real.reshape(200, 200))
