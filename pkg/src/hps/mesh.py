"""Quadtree/octree partitions of a square or cube.

Nodes are addressed by ``(depth, integer index vector)``; a node at depth
``d`` with index ``i`` covers ``lo + side * (i, i + 1) / 2**d``.  Children are
listed in the fixed order of :func:`hps.spectral.child_offsets` (SW, SE, NE,
NW in 2D, then the same four one layer up in 3D).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .spectral import (apply_refinement_interpolant, cheb_lobatto_1d,
                       child_offsets, faces_for_dim, face_local_axes,
                       gauss_legendre_1d)

DEFAULT_MAX_DEPTH = 10


class RefinementWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ValueError(f"box must be 2D or 3D, got lo={lo}, hi={hi}")
        sides = [b - a for a, b in zip(lo, hi)]
        if min(sides) <= 0:
            raise ValueError(f"box has non-positive side: lo={lo}, hi={hi}")
        if not np.allclose(sides, sides[0], rtol=1e-12, atol=0):
            raise ValueError(f"only squares/cubes are supported, got sides {sides}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def side(self):
        return self.hi[0] - self.lo[0]

    @classmethod
    def cube(cls, lo, hi, dim):
        return cls((lo,) * dim, (hi,) * dim)


@dataclass
class TreeNode:
    node_id: int
    depth: int
    index: tuple
    box: Box
    children: list = field(default_factory=list)
    parent: int | None = None

    @property
    def is_leaf(self):
        return not self.children


class DiscretizationTree:
    """Immutable-after-construction partition with per-leaf spectral data sizes.

    Leaves are ordered depth-first following the child order, so the leaves of
    any subtree are contiguous.
    """

    def __init__(self, domain: Box, p: int, nodes: list):
        if p < 4:
            raise ValueError(f"p must be >= 4, got {p}")
        self.domain = domain
        self.dim = domain.dim
        self.p = int(p)
        self.q = self.p - 2
        self.nodes = nodes
        self.root = nodes[0]
        self._by_key = {(n.depth, n.index): n for n in nodes}
        self.leaves = [n for n in self._dfs() if n.is_leaf]
        depth = max(n.depth for n in nodes)
        self.levels = [[] for _ in range(depth + 1)]
        for n in self._dfs():
            self.levels[n.depth].append(n)

    def _dfs(self):
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(self.nodes[c] for c in reversed(n.children))

    @property
    def n_leaves(self):
        return len(self.leaves)

    @property
    def N(self):
        return self.n_leaves * self.p ** self.dim

    @property
    def depth(self):
        return len(self.levels) - 1

    @property
    def is_uniform(self):
        return all(n.depth == self.depth for n in self.leaves)

    def node(self, depth, index):
        return self._by_key.get((depth, tuple(index)))

    def leaf_index(self):
        """Map node_id -> position in ``self.leaves``."""
        return {n.node_id: i for i, n in enumerate(self.leaves)}

    def subtree_leaves(self, node):
        """Leaves below ``node``, in tree leaf order."""
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            if n.is_leaf:
                out.append(n)
            else:
                stack.extend(self.nodes[c] for c in reversed(n.children))
        return out

    def internal_nodes_bottom_up(self):
        """Internal nodes, deepest level first, in level order."""
        out = []
        for level in reversed(self.levels):
            out.extend(n for n in level if not n.is_leaf)
        return out

    def locate(self, x):
        """Leaf containing point ``x`` (top-down descent)."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.domain.lo), np.array(self.domain.hi)
        tol = 1e-12 * self.domain.side
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise ValueError(f"point {x.tolist()} lies outside the domain")
        n = self.root
        while not n.is_leaf:
            mid = 0.5 * (np.array(n.box.lo) + np.array(n.box.hi))
            bits = tuple(int(v) for v in (x >= mid))
            n = self.nodes[n.children[child_offsets(self.dim).index(bits)]]
        return n

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        return {
            "dim": self.dim, "p": self.p, "q": self.q,
            "domain": {"lo": list(self.domain.lo), "hi": list(self.domain.hi)},
            "nodes": [{"id": n.node_id, "depth": n.depth, "lo": list(n.box.lo),
                       "hi": list(n.box.hi), "children": list(n.children)}
                      for n in self.nodes],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc):
        nodes_doc = sorted(doc["nodes"], key=lambda d: d["id"])
        if [d["id"] for d in nodes_doc] != list(range(len(nodes_doc))):
            raise ValueError("node ids must be 0..n-1")
        root = nodes_doc[0]
        dom = doc.get("domain") or {"lo": root["lo"], "hi": root["hi"]}
        domain = Box(dom["lo"], dom["hi"])
        nodes = []
        for d in nodes_doc:
            box = Box(d["lo"], d["hi"])
            scale = 2 ** d["depth"] / domain.side
            index = tuple(int(round((a - b) * scale)) for a, b in zip(box.lo, domain.lo))
            nodes.append(TreeNode(d["id"], d["depth"], index, box, list(d["children"])))
        for n in nodes:
            for c in n.children:
                nodes[c].parent = n.node_id
        tree = cls(domain, doc["p"], nodes)
        if doc.get("q", tree.q) != tree.q or doc["dim"] != tree.dim:
            raise ValueError("inconsistent dim/q in mesh document")
        return tree

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# construction helpers; trees are built as a set of leaf keys and then frozen
# ---------------------------------------------------------------------------

def _node_box(domain, depth, index):
    h = domain.side / 2 ** depth
    lo = tuple(a + h * i for a, i in zip(domain.lo, index))
    return Box(lo, tuple(v + h for v in lo))


def _child_keys(depth, index, dim):
    return [(depth + 1, tuple(2 * i + b for i, b in zip(index, bits)))
            for bits in child_offsets(dim)]


def _tree_from_leaf_keys(domain, p, leaf_keys):
    """Freeze a set of leaf keys into a :class:`DiscretizationTree`."""
    dim = domain.dim
    internal = set()
    for depth, index in leaf_keys:
        while depth > 0:
            depth -= 1
            index = tuple(i // 2 for i in index)
            if (depth, index) in internal:
                break
            internal.add((depth, index))
    nodes = []

    def add(key, parent):
        nid = len(nodes)
        node = TreeNode(nid, key[0], key[1], _node_box(domain, *key), parent=parent)
        nodes.append(node)
        if key in internal:
            for ck in _child_keys(*key, dim):
                node.children.append(add(ck, nid))
        return nid

    add((0, (0,) * dim), None)
    return DiscretizationTree(domain, p, nodes)


def _leaf_keys(tree):
    return {(n.depth, n.index) for n in tree.leaves}


def build_uniform_tree(domain: Box, L: int, dim: int | None = None, p: int = 8):
    """Complete tree of depth ``L`` with ``2**(dim*L)`` leaves."""
    if not isinstance(domain, Box):
        domain = Box(*domain)
    if dim is not None and dim != domain.dim:
        raise ValueError(f"dim={dim} does not match domain of dimension {domain.dim}")
    if L < 0:
        raise ValueError(f"depth must be >= 0, got {L}")
    if p < 4:
        raise ValueError(f"p must be >= 4, got {p}")
    dim = domain.dim
    n = 2 ** L
    keys = {(L, idx) for idx in np.ndindex(*(n,) * dim)}
    return _tree_from_leaf_keys(domain, p, keys)


def _face_neighbor_violations(keys, dim):
    """Coarse leaves that have a face neighbour more than one level finer."""
    to_split = set()
    for depth, index in keys:
        if depth < 2:
            continue
        n = 2 ** depth
        for axis in range(dim):
            for step in (-1, 1):
                j = list(index)
                j[axis] += step
                if not 0 <= j[axis] < n:
                    continue
                d, jj = depth, tuple(j)
                while d >= 0 and (d, jj) not in keys:
                    d -= 1
                    jj = tuple(v // 2 for v in jj)
                if d >= 0 and depth - d > 1:
                    to_split.add((d, jj))
    return to_split


def _split(keys, key, dim):
    keys.discard(key)
    keys.update(_child_keys(*key, dim))


def _restrict_keys(keys, dim):
    keys = set(keys)
    while True:
        bad = _face_neighbor_violations(keys, dim)
        if not bad:
            return keys
        for key in bad:
            _split(keys, key, dim)


def enforce_level_restriction(tree: DiscretizationTree) -> DiscretizationTree:
    """Split leaves until face-adjacent leaves differ in depth by at most one."""
    keys = _leaf_keys(tree)
    new = _restrict_keys(keys, tree.dim)
    if new == keys:
        return tree
    return _tree_from_leaf_keys(tree.domain, tree.p, new)


def level_restriction_violations(tree):
    """Brute-force list of face-adjacent leaf pairs whose depths differ by > 1."""
    leaves = tree.leaves
    lo = np.array([n.box.lo for n in leaves])
    hi = np.array([n.box.hi for n in leaves])
    depth = np.array([n.depth for n in leaves])
    tol = 1e-12 * tree.domain.side
    bad = []
    for i in range(len(leaves)):
        for axis in range(tree.dim):
            touch = np.abs(lo[:, axis] - hi[i, axis]) < tol
            others = [a for a in range(tree.dim) if a != axis]
            for a in others:
                touch &= (lo[:, a] < hi[i, a] - tol) & (hi[:, a] > lo[i, a] + tol)
            for j in np.flatnonzero(touch):
                if abs(depth[i] - depth[j]) > 1:
                    bad.append((leaves[i].node_id, leaves[j].node_id))
    return bad


# ---------------------------------------------------------------------------
# points
# ---------------------------------------------------------------------------

def leaf_cheb_points(leaf: TreeNode, p: int):
    """Chebyshev tensor grid on the leaf box, shape ``(p**d, d)``."""
    x = cheb_lobatto_1d(p)
    lo = np.array(leaf.box.lo)
    hi = np.array(leaf.box.hi)
    axes = [lo[k] + 0.5 * (x + 1.0) * (hi[k] - lo[k]) for k in range(lo.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def leaf_gauss_boundary_points(leaf: TreeNode, q: int):
    """Gauss panel points on each side/face, grouped per face in face order."""
    xg, _ = gauss_legendre_1d(q)
    lo = np.array(leaf.box.lo)
    hi = np.array(leaf.box.hi)
    dim = lo.size
    out = []
    for axis, side in faces_for_dim(dim):
        la = face_local_axes(axis, dim)
        locs = [lo[a] + 0.5 * (xg + 1.0) * (hi[a] - lo[a]) for a in la]
        mesh = np.meshgrid(*locs, indexing="ij")
        pts = np.empty((q ** (dim - 1), dim))
        pts[:, axis] = hi[axis] if side else lo[axis]
        for a, m in zip(la, mesh):
            pts[:, a] = m.ravel()
        out.append(pts)
    return np.vstack(out)


def sibling_groups(tree: DiscretizationTree, level: int):
    """Children ids of every internal node at ``level``, in child order."""
    if not 0 <= level < len(tree.levels):
        raise ValueError(f"level {level} outside 0..{tree.depth}")
    return [tuple(n.children) for n in tree.levels[level] if not n.is_leaf]


# ---------------------------------------------------------------------------
# adaptive refinement
# ---------------------------------------------------------------------------

@dataclass
class RefinementCriterion:
    """Relative sup-norm interpolation check on a set of fields.

    ``test_fields`` are callables mapping an ``(n, d)`` point array to values.
    A callable with an integer attribute ``n_components`` returns an
    ``(n, m)`` array whose columns are checked as separate fields; this lets
    related fields share one evaluation.  ``global_sup`` holds the running
    estimate of each scalar field's sup norm, taken over every sample seen
    during refinement.
    """

    tol: float
    p: int
    test_fields: list
    global_sup: list | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.global_sup is None:
            self.global_sup = [0.0] * self.n_scalar_fields

    @property
    def n_scalar_fields(self):
        return sum(_n_components(fn) for fn in self.test_fields)


def _n_components(fn):
    return int(getattr(fn, "n_components", 1))


def _sample(field_fn, pts):
    m = _n_components(field_fn)
    with np.errstate(all="ignore"):
        v = np.asarray(field_fn(pts))
    shape = pts.shape[:1] if m == 1 else (len(pts), m)
    v = np.broadcast_to(v, shape).astype(np.result_type(v, float))
    return v.reshape(len(pts), m)


def _passes(err, sup, tol):
    return err == 0 or (sup > 0 and err / sup < tol)


@lru_cache(maxsize=None)
def _unit_grids(p, dim):
    """Chebyshev grid of a box and of its ``2^d`` children, on the unit cube."""
    x = 0.5 * (cheb_lobatto_1d(p) + 1.0)
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    g0 = np.stack([m.ravel() for m in mesh], axis=-1)
    g1 = np.vstack([0.5 * (np.array(off) + g0) for off in child_offsets(dim)])
    g0.setflags(write=False)
    g1.setflags(write=False)
    return g0, g1


def _node_errors(keys, domain, p, field_fn, chunk=128):
    """Per-node, per-component interpolation error and sup, shape ``(n, m)``."""
    if len(keys) > chunk:
        parts = [_node_errors(keys[i:i + chunk], domain, p, field_fn, chunk)
                 for i in range(0, len(keys), chunk)]
        return (np.concatenate([a for a, _ in parts]),
                np.concatenate([b for _, b in parts]))
    return _node_errors_chunk(keys, domain, p, field_fn)


def _node_errors_chunk(keys, domain, p, field_fn):
    """Max interpolation error and max ``|f|`` over parent and child grids.

    A non-finite sample on the parent grid (a point singularity of a source)
    pollutes the whole interpolant, so such nodes report an infinite error and
    keep splitting until ``max_depth``.  Non-finite child samples are skipped,
    and the sup estimate only uses finite samples.
    """
    dim = domain.dim
    n = len(keys)
    g0, g1 = _unit_grids(p, dim)
    h = np.array([domain.side / 2 ** d for d, _ in keys])
    lo = np.array(domain.lo) + h[:, None] * np.array([idx for _, idx in keys], dtype=float)
    x0 = (lo[:, None, :] + h[:, None, None] * g0[None]).reshape(-1, dim)
    x1 = (lo[:, None, :] + h[:, None, None] * g1[None]).reshape(-1, dim)
    m = _n_components(field_fn)
    f0 = _sample(field_fn, x0).reshape(n, -1, m).transpose(0, 2, 1).reshape(n * m, -1)
    f1 = _sample(field_fn, x1).reshape(n, -1, m).transpose(0, 2, 1).reshape(n * m, -1)
    ok0 = np.isfinite(f0)
    ok1 = np.isfinite(f1)
    interp = apply_refinement_interpolant(np.where(ok0, f0, 0.0), p, dim)
    err = np.where(ok1, np.abs(f1 - interp), 0.0).max(axis=1)
    err[~ok0.all(axis=1)] = np.inf
    sup = np.maximum(np.where(ok0, np.abs(f0), 0.0).max(axis=1),
                     np.where(ok1, np.abs(f1), 0.0).max(axis=1))
    return err.reshape(n, m), sup.reshape(n, m)


def _field_columns(fields):
    """``(fn, first global column)`` for each callable."""
    out, c = [], 0
    for fn in fields:
        out.append((fn, c))
        c += _n_components(fn)
    return out


def _refine_fields(domain, p, fields, tol, max_depth, sups):
    """Level-synchronous refinement of each scalar field separately.

    Every scalar field keeps its own frontier, but each callable is evaluated
    once per node per level for all of its components.  Returns per-field
    leaf sets; ``sups`` is updated in place.
    """
    dim = domain.dim
    cols = _field_columns(fields)
    ncol = len(sups)
    root = (0, (0,) * dim)
    frontiers = [[root] for _ in range(ncol)]
    leaves = [set() for _ in range(ncol)]
    while any(frontiers):
        nxt = [[] for _ in range(ncol)]
        for fn, c0 in cols:
            m = _n_components(fn)
            need = sorted(set().union(*frontiers[c0:c0 + m]))
            if not need:
                continue
            err, s = _node_errors(need, domain, p, fn)
            pos = {k: i for i, k in enumerate(need)}
            for j in range(m):
                c = c0 + j
                sups[c] = max(sups[c], float(s[:, j].max(initial=0.0)))
            for j in range(m):
                c = c0 + j
                for key in frontiers[c]:
                    e = err[pos[key], j]
                    if _passes(e, sups[c], tol) or key[0] >= max_depth:
                        leaves[c].add(key)
                    else:
                        nxt[c].extend(_child_keys(*key, dim))
        frontiers = nxt
    return leaves


def _failing(keys, domain, p, fields, sups, tol, update_sup=True):
    """Keys failing the criterion for any scalar field."""
    out = set()
    if not keys:
        return out
    for fn, c0 in _field_columns(fields):
        err, s = _node_errors(keys, domain, p, fn)
        for j in range(err.shape[1]):
            c = c0 + j
            if update_sup:
                sups[c] = max(sups[c], float(s[:, j].max(initial=0.0)))
            for key, e in zip(keys, err[:, j]):
                if not _passes(e, sups[c], tol):
                    out.add(key)
    return out


def refine_adaptive(domain: Box, criterion: RefinementCriterion,
                    max_depth: int = DEFAULT_MAX_DEPTH) -> DiscretizationTree:
    """Adaptive octree: union of per-field refinements, then level restriction.

    After the union and the level restriction, every leaf is rechecked against
    every field and failing leaves are split again until the tree is stable,
    so the criterion holds on every leaf below ``max_depth``.
    """
    if not isinstance(domain, Box):
        domain = Box(*domain)
    if domain.dim != 3:
        raise ValueError("adaptive refinement is implemented for 3D domains only")
    dim, p, tol = domain.dim, criterion.p, criterion.tol
    per_field = _refine_fields(domain, p, criterion.test_fields, tol, max_depth,
                               criterion.global_sup)
    keys = set()
    for leaves in per_field:
        keys = _union_keys(keys, leaves) if keys else set(leaves)
    if not keys:
        keys = {(0, (0,) * dim)}

    capped = set()
    while True:
        keys = _restrict_keys(keys, dim)
        todo = sorted(k for k in keys if k not in capped)
        failing = _failing(todo, domain, p, criterion.test_fields, criterion.global_sup, tol)
        split = set()
        for key in failing:
            if key[0] >= max_depth:
                capped.add(key)
            else:
                split.add(key)
        if not split:
            break
        for key in split:
            _split(keys, key, dim)
    if capped:
        warnings.warn(f"{len(capped)} leaves still fail the refinement criterion at "
                      f"max_depth={max_depth}", RefinementWarning, stacklevel=2)
    return _tree_from_leaf_keys(domain, p, keys)


def _internal_keys(keys):
    out = set()
    for depth, index in keys:
        while depth > 0:
            depth -= 1
            index = tuple(i // 2 for i in index)
            if (depth, index) in out:
                break
            out.add((depth, index))
    return out


def _union_keys(a, b):
    """Leaf set of the union (common refinement) of two trees."""
    ia, ib = _internal_keys(a), _internal_keys(b)
    return {k for k in a if k not in ib} | {k for k in b if k not in ia}


def criterion_failures(tree, criterion, max_depth=None):
    """Leaves failing the criterion under its current sup estimate.

    Leaves at ``max_depth`` (if given) are exempt, as refinement stops there.
    """
    keys = sorted((n.depth, n.index) for n in tree.leaves
                  if max_depth is None or n.depth < max_depth)
    return sorted(_failing(keys, tree.domain, tree.p, criterion.test_fields,
                           criterion.global_sup, criterion.tol, update_sup=False))
