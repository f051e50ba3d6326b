import warnings

import numpy as np
import pytest

from hps.mesh import (Box, DiscretizationTree, RefinementCriterion, RefinementWarning,
                      build_uniform_tree, criterion_failures, enforce_level_restriction,
                      level_restriction_violations, refine_adaptive, sibling_groups)


@pytest.mark.parametrize("dim,L", [(2, 0), (2, 3), (3, 2)])
def test_uniform_counts(dim, L):
    tree = build_uniform_tree(Box.cube(0, 1, dim), L, p=6)
    assert tree.n_leaves == 2 ** (dim * L)
    assert tree.N == tree.n_leaves * 6 ** dim
    assert tree.depth == L and tree.is_uniform
    for lvl in range(L):
        assert all(len(g) == 2 ** dim for g in sibling_groups(tree, lvl))


def test_bad_box_rejected():
    with pytest.raises(ValueError):
        Box((0.0, 0.0), (1.0, 0.0))


def test_locate_and_json_roundtrip():
    tree = build_uniform_tree(Box.cube(-1, 1, 2), 2, p=5)
    back = DiscretizationTree.from_json(tree.to_json())
    assert back.to_dict() == tree.to_dict()
    leaf = tree.locate(np.array([0.3, -0.7]))
    lo, hi = np.array(leaf.box.lo), np.array(leaf.box.hi)
    assert np.all(lo <= [0.3, -0.7]) and np.all([0.3, -0.7] <= hi)


def _bump(c, w):
    c = np.asarray(c)
    return lambda x: np.exp(-w * ((x - c) ** 2).sum(1))


def test_level_restriction_exhaustive():
    crit = RefinementCriterion(1e-6, 6, [_bump([0.11, 0.13, 0.87], 400.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RefinementWarning)
        tree = refine_adaptive(Box.cube(0, 1, 3), crit, max_depth=5)
    assert tree.depth >= 3
    assert level_restriction_violations(tree) == []
    again = enforce_level_restriction(tree)
    assert again.to_dict() == tree.to_dict()


def test_criterion_holds_on_every_leaf():
    fields = [_bump([0.3, 0.4, 0.5], 60.0), lambda x: np.sin(4 * x[:, 0]) * x[:, 1]]
    crit = RefinementCriterion(1e-4, 8, fields)
    tree = refine_adaptive(Box.cube(0, 1, 3), crit, max_depth=6)
    assert tree.n_leaves > 1
    assert criterion_failures(tree, crit, max_depth=6) == []
    assert level_restriction_violations(tree) == []


@pytest.mark.parametrize("field", [lambda x: 2.5 + 0 * x[:, 0],
                                   lambda x: (x[:, 0] ** 7 - 3 * x[:, 1] ** 4 * x[:, 2] ** 3
                                              + x[:, 2] ** 7)])
def test_polynomial_fields_give_single_leaf(field):
    tree = refine_adaptive(Box.cube(-1, 1, 3), RefinementCriterion(1e-10, 8, [field]))
    assert tree.n_leaves == 1


def test_tighter_tol_refines_more():
    f = _bump([0.5, 0.5, 0.5], 100.0)
    n = [refine_adaptive(Box.cube(0, 1, 3), RefinementCriterion(t, 6, [f]), max_depth=6).n_leaves
         for t in (1e-2, 1e-4)]
    assert n[0] < n[1]


def test_max_depth_cap_warns():
    f = lambda x: np.abs(x[:, 0] - 0.3)
    with pytest.warns(RefinementWarning):
        refine_adaptive(Box.cube(0, 1, 3), RefinementCriterion(1e-8, 6, [f]), max_depth=2)
