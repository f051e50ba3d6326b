import numpy as np
import pytest

from hps.local_solve import CoefficientField
from hps.mesh import Box, RefinementCriterion, build_uniform_tree, refine_adaptive
from hps.problems import (ProblemSpec, error_report, make_manufactured_2d_dtn,
                          make_manufactured_2d_iti, make_scattering)
from hps.solver import HPSSolver, exact_on_tree, leaf_source_samples
from hps.downpass import SolutionField


def _smooth3d():
    # u = e^x sin(y) cos(z) has Laplacian -u
    ex = lambda x: np.exp(x[:, 0]) * np.sin(x[:, 1]) * np.cos(x[:, 2])
    return ProblemSpec(name="smooth3d", domain=Box.cube(0, 1, 3),
                       coeffs=(CoefficientField("laplacian", 1.0),),
                       source=lambda x: -ex(x), g=ex, exact=ex)


@pytest.mark.parametrize("make,p,L,tol", [(make_manufactured_2d_dtn, 16, 3, 1e-7),
                                          (make_manufactured_2d_iti, 16, 4, 1e-7)])
def test_manufactured_accuracy(make, p, L, tol):
    pr = make()
    tree = build_uniform_tree(pr.domain, L, p=p)
    u = HPSSolver(tree, pr).solve()
    err = error_report(u.values, exact_on_tree(tree, pr.exact))
    assert err["rel_Linf"] < tol


def test_factor_reuse_is_linear_in_sources():
    pr = make_manufactured_2d_dtn()
    tree = build_uniform_tree(pr.domain, 2, p=8)
    s = HPSSolver(tree, pr).factor()
    f = leaf_source_samples(tree, pr)
    zero = [0 * a for a in f]
    u1 = s.solve(f).values
    u2 = s.solve([2 * a for a in f]).values
    u0 = s.solve(zero).values
    assert np.allclose(u2 - u0, 2 * (u1 - u0), atol=1e-11)


@pytest.mark.parametrize("recompute", [False, True])
def test_solve_once_matches_two_phase(recompute):
    pr = _smooth3d()
    tree = build_uniform_tree(pr.domain, 2, p=6)
    a = HPSSolver(tree, pr).solve().values
    b = HPSSolver(tree, pr).solve_once(recompute=recompute).values
    assert np.abs(a - b).max() < 1e-12 * np.abs(a).max()


def test_nonuniform_3d_tree_is_accurate():
    pr = _smooth3d()
    bump = lambda x: np.exp(-200 * ((x - 0.2) ** 2).sum(1))
    tree = refine_adaptive(pr.domain, RefinementCriterion(1e-3, 8, [bump]), max_depth=3)
    assert not tree.is_uniform
    u = HPSSolver(tree, pr).solve_once()
    err = error_report(u.values, exact_on_tree(tree, pr.exact))
    assert err["rel_Linf"] < 1e-7


@pytest.mark.parametrize("make", [make_manufactured_2d_dtn, make_manufactured_2d_iti,
                                  lambda: make_manufactured_2d_iti(iti_eta=20.0),
                                  lambda: make_scattering(8.0)])
def test_solve_transpose_matches_dense(make):
    pr = make()
    tree = build_uniform_tree(pr.domain, 1, p=6)
    s = HPSSolver(tree, pr).factor()
    nl, P = tree.n_leaves, tree.p ** 2
    base = s.solve([np.zeros(P)] * nl).values.ravel()
    cols = []
    for j in range(nl * P):
        e = np.zeros(nl * P)
        e[j] = 1.0
        cols.append(s.solve(list(e.reshape(nl, P))).values.ravel() - base)
    A = np.array(cols).T
    rng = np.random.default_rng(0)
    ubar = rng.standard_normal((nl, P))
    got = np.concatenate(s.solve_transpose(list(ubar)))
    # interior columns only: boundary samples of the source are not used
    assert np.abs(got - A.T @ ubar.ravel()).max() < 1e-10 * np.abs(A).max()


def test_evaluate_and_dump_roundtrip(tmp_path):
    pr = make_manufactured_2d_iti()
    tree = build_uniform_tree(pr.domain, 4, p=16)
    u = HPSSolver(tree, pr).solve()
    x = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    want = pr.exact(x)
    assert np.abs(u.evaluate_at(x) - want).max() < 1e-6 * np.abs(want).max()
    path = str(tmp_path / "u")
    u.dump(path)
    back = SolutionField.load(path, tree)
    assert np.array_equal(back.values, u.values)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        HPSSolver(build_uniform_tree(Box.cube(0, 1, 3), 1, p=4), make_manufactured_2d_dtn())
