import numpy as np
import pytest
from helpers import dense_merge_oracle, monolithic_solve

from hps.local_solve import CoefficientField
from hps.merge import (BoundaryOp, DenseSolver, ItISolver, MergeError, iti_D_inverse,
                       leaf_faces, merge_layout, merge_nodes, top_D_size)
from hps.mesh import Box, build_uniform_tree, leaf_gauss_boundary_points
from hps.problems import (ProblemSpec, make_manufactured_2d_dtn, make_manufactured_2d_iti,
                          make_scattering)
from hps.solver import HPSSolver, boundary_points


def random_merge_case(rng, dim, n_side, variant):
    p = max(4, n_side + 2)  # the tree only supplies box geometry
    tree = build_uniform_tree(Box.cube(0.0, 1.0, dim), 1, p=p)
    kids, pts = [], []
    for leaf in tree.leaves:
        nb = 2 * dim * n_side ** (dim - 1)
        if variant == "dtn":
            T = rng.standard_normal((nb, nb)) + nb * np.eye(nb)
            h = rng.standard_normal(nb)
        else:
            T = 0.3 * (rng.standard_normal((nb, nb)) + 1j * rng.standard_normal((nb, nb))) / np.sqrt(nb)
            h = rng.standard_normal(nb) + 1j * rng.standard_normal(nb)
        kids.append(BoundaryOp(T, h, leaf_faces(leaf, dim), leaf.node_id))
        pts.append(leaf_gauss_boundary_points(leaf, n_side))
    return tree, kids, pts


def check_against_oracle(rng, dim, n_side, variant):
    tree, kids, pts = random_merge_case(rng, dim, n_side, variant)
    Ts = [k.T.copy() for k in kids]
    hs = [k.h.copy() for k in kids]
    art = merge_nodes(kids, n_side, variant, node_id=0)
    ppts, _ = boundary_points(tree.domain, art.faces, n_side)
    T, h, solve = dense_merge_oracle(Ts, hs, pts, ppts, variant)
    scale = max(1.0, np.abs(T).max())
    assert np.abs(art.T - T).max() / scale < 1e-10
    assert np.abs(art.h - h).max() / max(1.0, np.abs(h).max()) < 1e-10
    g = rng.standard_normal(len(ppts))
    for got, want in zip(art.child_data(g), solve(g)):
        assert np.abs(got - want).max() / max(1.0, np.abs(want).max()) < 1e-10


@pytest.mark.parametrize("seed", range(6))
def test_random_blocks_match_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    for dim, variant in ((2, "dtn"), (2, "iti"), (3, "dtn")):
        check_against_oracle(rng, dim, int(rng.integers(1, 5)), variant)


def _vc3_problem():
    coeffs = (CoefficientField("laplacian", lambda x: 1 + 0.2 * x[:, 0]),
              CoefficientField("first", lambda x: 0.3 * x[:, 1], (2,)),
              CoefficientField("zeroth", lambda x: -1 - x[:, 2] ** 2))
    return ProblemSpec(name="vc3", domain=Box.cube(0, 1, 3), coeffs=coeffs,
                       source=lambda x: np.sin(3 * x[:, 0]) * x[:, 1] + x[:, 2],
                       g=lambda x: np.cos(x.sum(1)))


@pytest.mark.parametrize("make", [make_manufactured_2d_dtn, make_manufactured_2d_iti])
@pytest.mark.parametrize("p", [6, 8])
def test_one_level_tree_matches_monolithic_2d(make, p):
    pr = make()
    tree = build_uniform_tree(pr.domain, 1, p=p)
    got = HPSSolver(tree, pr).solve().values
    want = monolithic_solve(tree, pr)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-10


@pytest.mark.parametrize("make", [lambda: make_manufactured_2d_iti(iti_eta=30.0),
                                  lambda: make_scattering(12.0)])
def test_root_closures_match_monolithic(make):
    pr = make()
    tree = build_uniform_tree(pr.domain, 1, p=8)
    got = HPSSolver(tree, pr).solve().values
    want = monolithic_solve(tree, pr)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-10


def test_one_level_tree_matches_monolithic_3d():
    pr = _vc3_problem()
    tree = build_uniform_tree(pr.domain, 1, p=6)
    got = HPSSolver(tree, pr).solve().values
    want = monolithic_solve(tree, pr)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-10


@pytest.mark.parametrize("n_side", range(1, 9))
def test_iti_structured_inverse(n_side):
    rng = np.random.default_rng(100 + n_side)
    m = 2 * n_side
    D = np.eye(2 * m, dtype=complex)
    D[:m, m:] = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    D[m:, :m] = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    dense = np.linalg.inv(D)
    assert np.abs(iti_D_inverse(D) - dense).max() / np.abs(dense).max() < 1e-12
    s = ItISolver(D)
    assert np.allclose(s.solve(np.eye(2 * m)), dense, rtol=0, atol=1e-12 * np.abs(dense).max())
    assert np.allclose(s.solve_T(np.eye(2 * m)), dense.T, rtol=0,
                       atol=1e-12 * np.abs(dense).max())


def test_dense_solver_transpose():
    rng = np.random.default_rng(3)
    D = rng.standard_normal((9, 9)) + 9 * np.eye(9)
    s = DenseSolver(D.copy())
    b = rng.standard_normal(9)
    assert np.allclose(D.T @ s.solve_T(b), b, atol=1e-13)
    assert np.allclose(D @ s.solve(b), b, atol=1e-13)


def test_singular_interface_is_reported():
    with pytest.raises(MergeError):
        DenseSolver(np.zeros((3, 3)))


def test_layout_sizes_2d():
    tree = build_uniform_tree(Box.cube(0, 1, 2), 1, p=8)
    lay = merge_layout([leaf_faces(n, 2) for n in tree.leaves], 6, "dtn")
    assert lay.n_ext == 4 * 2 * 6 and lay.n_int == 4 * 6
    lay = merge_layout([leaf_faces(n, 2) for n in tree.leaves], 6, "iti")
    assert lay.n_int == 2 * 4 * 6


@pytest.mark.parametrize("p,L,D", [(8, 3, 6912), (12, 3, 19200), (16, 2, 9408)])
def test_top_interface_size_3d(p, L, D):
    # 12 (q 2^(L-1))^2 interface points at the root of a uniform octree
    tree = build_uniform_tree(Box.cube(0, 1, 3), L, p=p)
    assert top_D_size(tree) == D == 12 * ((p - 2) * 2 ** (L - 1)) ** 2
