"""Memory-budgeted execution of the HPS stages over a modeled accelerator.

The accelerator is an arena of fixed capacity.  Work runs on the host with
the usual kernels, but every stage declares what it would hold on the
device and what it would move across the host link, so three schedules can
be compared by bytes moved:

``none``
    every stage pulls its inputs from the host and pushes all outputs back
    (``Y, v, T, h, S, g~`` and boundary data).
``leaf``
    leaves are processed in batches of the largest size that fits; ``Y`` and
    ``v`` are dropped and the local solves are re-run at the end.
``subtree``
    complete subtrees of the largest depth that fits are solved and merged
    on the device; only their top ``T, h`` stay resident, and the local
    solves and subtree merges are re-run during the downward pass.

Byte model (``w`` bytes per scalar, ``P = p^d`` grid points, ``nb`` leaf
boundary points, ``n_c`` coefficient fields):

* leaf inputs: ``(n_c + 1) P w`` (coefficient and source samples)
* leaf outputs: ``Y = P nb w``, ``v = P w``, ``T = nb^2 w``, ``h = g = nb w``,
  ``u = P w``
* leaf working set: inputs + ``L = P^2 w`` + factor workspace + outputs
* node with ``n_e`` exterior and ``n_i`` interface points:
  ``T = n_e^2 w``, ``S = n_i n_e w``, ``g~ = n_i w``, ``h = g = n_e w``
* merge working set: children ``T, h`` + ``A, B, C, D`` (``D`` factored in
  place) + outputs ``T, S, h, g~``.

Flops use the dense formulas ``2/3 n^3`` (LU), ``2 n^2 m`` (triangular
solves) and ``2 m n k`` (products), times four for complex data.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .downpass import SolutionField
from .local_solve import factor_leaf
from .mesh import DiscretizationTree, leaf_cheb_points
from .merge import BoundaryOp, interface_sizes, leaf_faces, merge_nodes, node_faces
from .solver import boundary_points
from .spectral import leaf_operators

STRATEGIES = ("none", "leaf", "subtree")
H2D, D2H = "host->device", "device->host"


class PlanError(RuntimeError):
    """A budget cannot hold a required working set."""


@dataclass(frozen=True)
class ArenaBudget:
    device_capacity: float = math.inf
    host_capacity: float = math.inf  # soft limit, reported only
    real_width: int = 8
    complex_width: int = 16

    def __post_init__(self):
        if not self.device_capacity > 0:
            raise ValueError("device capacity must be positive")


# ---------------------------------------------------------------------------
# problem shape and sizes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformShape:
    """Size-only stand-in for a uniform tree (dry runs at any depth)."""

    dim: int
    L: int
    p: int
    variant: str = "dtn"
    n_coeff_fields: int = 1
    is_complex: bool = False

    @property
    def q(self):
        return self.p - 2


def _width(budget, is_complex):
    return budget.complex_width if is_complex else budget.real_width


class _Sizes:
    """Closed-form byte and flop counts for one discretization."""

    def __init__(self, dim, p, variant, n_coeff, width, is_complex):
        self.dim, self.p, self.variant = dim, p, variant
        self.q = p - 2
        self.P = p ** dim
        self.nb = 2 * dim * self.q ** (dim - 1)
        self.n_coeff = n_coeff
        self.w = width
        self.cplx = 4 if is_complex else 1

    # leaf items
    def leaf_inputs(self):
        return (self.n_coeff + 1) * self.P * self.w

    def leaf_item(self, kind):
        P, nb, w = self.P, self.nb, self.w
        return {"Y": P * nb * w, "v": P * w, "T": nb * nb * w, "h": nb * w,
                "g": nb * w, "u": P * w}[kind]

    def leaf_factor_bytes(self):
        n = (self.p - 2) ** self.dim if self.variant == "dtn" else self.P
        return n * n * self.w

    def leaf_ws(self):
        out = sum(self.leaf_item(k) for k in ("Y", "v", "T", "h"))
        return self.leaf_inputs() + self.P * self.P * self.w + self.leaf_factor_bytes() + out

    def leaf_flops(self):
        P, nb = self.P, self.nb
        if self.variant == "dtn":
            ni = (self.p - 2) ** self.dim
            ne = P - ni
            f = 2 / 3 * ni ** 3 + 2 * ni * ne * nb + 2 * ni * ni * nb + 2 * nb * P * nb
            f += 2 * ni * ni + 2 * nb * P
        else:
            f = 2 / 3 * P ** 3 + 2 * P * P * nb + 2 * nb * P * nb + 2 * P * P + 2 * nb * P
        return f * self.cplx

    def reconstruct_flops(self):
        return 2 * self.P * self.nb * self.cplx

    # node items
    def node_item(self, kind, ne, ni):
        w = self.w
        return {"T": ne * ne * w, "h": ne * w, "g": ne * w, "S": ni * ne * w,
                "gt": ni * w}[kind]

    def merge_ws(self, ne, ni, child_ne):
        w = self.w
        kids = sum(c * c + c for c in child_ne) * w
        blocks = (ne * ne + 2 * ne * ni + ni * ni) * w
        outs = (ne * ne + ni * ne + ne + ni) * w
        return kids + blocks + outs

    def merge_flops(self, ne, ni):
        f = 2 / 3 * ni ** 3 + 2 * ni * ni * ne + 2 * ne * ni * ne + 2 * ni * ni + 2 * ne * ni
        return f * self.cplx

    def down_flops(self, ne, ni):
        return 2 * ni * ne * self.cplx


class _Level:
    """Nodes of one depth: ids (may be None for dry runs) and per-node sizes."""

    def __init__(self, depth, count, ne, ni, child_ne, ids=None):
        self.depth, self.count = depth, count
        self.ne, self.ni, self.child_ne = ne, ni, child_ne  # arrays of length count
        self.ids = ids


def _uniform_level(shape_dim, q, variant, L, depth):
    k = L - depth  # height above the leaves
    n = 2 ** (shape_dim * depth)
    if shape_dim == 2:
        ne, ni = 4 * q * 2 ** k, 2 * q * 2 ** k
        child = [4 * q * 2 ** (k - 1)] * 4
    else:
        ne, ni = 6 * (q * 2 ** k) ** 2, 3 * (q * 2 ** (k - 1)) ** 2 * 4
        child = [6 * (q * 2 ** (k - 1)) ** 2] * 8
    if variant == "iti":
        ni *= 2
    return n, ne, ni, child


class _Geometry:
    """Tree structure needed by the schedules, for real trees or uniform shapes."""

    def __init__(self, tree_or_shape, variant):
        if isinstance(tree_or_shape, DiscretizationTree):
            t = tree_or_shape
            self.tree = t
            self.dim, self.p, self.L = t.dim, t.p, t.depth
            self.uniform = t.is_uniform
            self.n_leaves = t.n_leaves
            sizes = interface_sizes(t)
            npp = t.q ** (t.dim - 1)
            ne = {n.node_id: npp * sum(len(f) for f in node_faces(t, n)) for n in t.nodes}
            self.levels = []
            for d, nodes in enumerate(t.levels):
                internal = [n for n in nodes if not n.is_leaf]
                if not internal:
                    self.levels.append(_Level(d, 0, [], [], [], []))
                    continue
                mult = 2 if variant == "iti" else 1
                self.levels.append(_Level(
                    d, len(internal), [ne[n.node_id] for n in internal],
                    [mult * sizes[n.node_id] for n in internal],
                    [[ne[c] for c in n.children] for n in internal],
                    [n.node_id for n in internal]))
        else:
            s = tree_or_shape
            self.tree = None
            self.dim, self.p, self.L = s.dim, s.p, s.L
            self.uniform = True
            self.n_leaves = 2 ** (s.dim * s.L)
            self.levels = []
            for d in range(s.L):
                n, ne, ni, child = _uniform_level(s.dim, s.p - 2, variant, s.L, d)
                self.levels.append(_Level(d, n, _Rep(ne, n), _Rep(ni, n), _Rep(child, n)))
            self.levels.append(_Level(s.L, 0, [], [], []))

    def leaf_ids(self):
        return None if self.tree is None else [n.node_id for n in self.tree.leaves]

    def internal_levels_bottom_up(self, top=0, bottom=None):
        """Levels with internal nodes from ``bottom`` (exclusive of leaves) up to ``top``."""
        bottom = self.L - 1 if bottom is None else bottom
        return [self.levels[d] for d in range(bottom, top - 1, -1) if self.levels[d].count]


class _Rep:
    """Constant sequence without materializing it (uniform dry runs)."""

    def __init__(self, value, n):
        self.value, self.n = value, n

    def __len__(self):
        return self.n

    def __iter__(self):
        return (self.value for _ in range(self.n))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return _Rep(self.value, len(range(*i.indices(self.n))))
        return self.value

    def total(self, fn):
        return self.n * fn(self.value)


def _total(seq, fn):
    if isinstance(seq, _Rep):
        return seq.total(fn)
    return sum(fn(x) for x in seq)


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

@dataclass
class ExecutionPlan:
    strategy: str
    dim: int
    L: int
    p: int
    variant: str
    n_leaves: int
    budget: ArenaBudget
    batch_size: int | None = None
    n_batches: int = 1
    subtree_depth: int | None = None
    n_subtrees: int = 0
    subtree_root_depth: int | None = None
    width: int = 8
    n_coeff_fields: int = 1
    is_complex: bool = False
    modeled_peak: float = 0.0
    fits_fused: bool = False
    notes: list = field(default_factory=list)

    @property
    def fused(self):
        """Whole tree in one device pass (single batch or subtree of full depth)."""
        if self.strategy == "leaf":
            return self.n_batches == 1 and self.fits_fused
        if self.strategy == "subtree":
            return self.subtree_depth == self.L
        return False

    def batches(self):
        """Leaf index ranges of the batches (leaf strategy)."""
        b = self.batch_size or self.n_leaves
        return [range(i, min(i + b, self.n_leaves)) for i in range(0, self.n_leaves, b)]

    def to_dict(self):
        return {"strategy": self.strategy, "dim": self.dim, "L": self.L, "p": self.p,
                "variant": self.variant, "n_leaves": self.n_leaves,
                "device_capacity": _num(self.budget.device_capacity),
                "batch_size": self.batch_size, "n_batches": self.n_batches,
                "subtree_depth": self.subtree_depth, "n_subtrees": self.n_subtrees,
                "subtree_root_depth": self.subtree_root_depth,
                "modeled_peak_bytes": _num(self.modeled_peak), "notes": list(self.notes)}


def _num(x):
    return None if x == math.inf else float(x)


def _problem_traits(problem, variant):
    if problem is None:
        return variant or "dtn", 1, variant == "iti"
    v = problem.variant
    cplx = v == "iti" or any(np.iscomplexobj(c.evaluator) for c in problem.coeffs
                             if not callable(c.evaluator))
    return v, len(problem.coeffs), cplx


def make_plan(tree, strategy, budget: ArenaBudget | None = None, problem=None,
              subtree_depth=None, variant=None):
    """Plan one of the three schedules for ``tree`` (a tree or a :class:`UniformShape`).

    ``leaf``: the largest batch of leaf working sets that fits.  ``subtree``:
    the largest depth ``s`` whose subtree passes (and the resident subtree
    tops) fit, unless ``subtree_depth`` is given.  ``none``: one logical
    batch; every stage offloads its outputs.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    budget = budget or ArenaBudget()
    if isinstance(tree, UniformShape):
        v, nc, cplx = tree.variant, tree.n_coeff_fields, tree.is_complex
    else:
        v, nc, cplx = _problem_traits(problem, variant)
    geo = _Geometry(tree, v)
    if geo.dim == 3 and strategy != "none":
        raise PlanError("3D runs move data at every merge level; the leaf and subtree "
                        "recomputation strategies are two-dimensional only")
    if strategy != "none" and not geo.uniform:
        raise PlanError("recomputation strategies need a uniform tree")
    w = _width(budget, cplx)
    sz = _Sizes(geo.dim, geo.p, v, nc, w, cplx)
    cap = budget.device_capacity
    if sz.leaf_ws() > cap:
        raise PlanError(f"device capacity {cap:.3g} B cannot hold one leaf working set "
                        f"({sz.leaf_ws()} B)")
    plan = ExecutionPlan(strategy=strategy, dim=geo.dim, L=geo.L, p=geo.p, variant=v,
                         n_leaves=geo.n_leaves, budget=budget, width=w,
                         n_coeff_fields=nc, is_complex=cplx)
    if strategy == "none":
        plan.batch_size = min(geo.n_leaves, int(cap // sz.leaf_ws())) if cap < math.inf \
            else geo.n_leaves
        plan.n_batches = math.ceil(geo.n_leaves / plan.batch_size)
        plan.modeled_peak = _none_peak(geo, sz, plan.batch_size, cap)
    elif strategy == "leaf":
        per = sz.leaf_ws() + sz.leaf_item("g") + sz.leaf_item("u")  # reconstruct re-solves
        b = geo.n_leaves if cap == math.inf else int(min(geo.n_leaves, cap // per))
        plan.batch_size = b
        plan.n_batches = math.ceil(geo.n_leaves / b)
        fp = _fused_peak(geo, sz)
        plan.fits_fused = b == geo.n_leaves and fp <= cap
        plan.modeled_peak = fp if plan.fits_fused else _leaf_peak(geo, sz, b)
    else:
        if subtree_depth is None:
            s = 0
            for cand in range(1, geo.L + 1):
                if _subtree_peak(geo, sz, cand, cap) <= cap:
                    s = cand
            if s == 0:
                raise PlanError("no complete subtree of depth >= 1 fits the device")
        else:
            s = int(subtree_depth)
            if not 1 <= s <= geo.L:
                raise ValueError(f"subtree depth must lie in 1..{geo.L}")
        plan.subtree_depth = s
        plan.subtree_root_depth = geo.L - s
        plan.n_subtrees = 2 ** (geo.dim * (geo.L - s))
        plan.modeled_peak = _subtree_peak(geo, sz, s, cap)
    if plan.modeled_peak > cap:
        plan.notes.append(f"modeled peak {plan.modeled_peak:.4g} B exceeds capacity; "
                          "execution will stop at the first stage that does not fit")
    return plan


def _sub_levels(geo, s):
    """Per-height (count per subtree, ne, ni, child_ne) inside a depth-s subtree."""
    out = []
    for k in range(1, s + 1):
        lv = geo.levels[geo.L - k]
        per = 2 ** (geo.dim * (s - k))
        out.append((per, lv.ne[0], lv.ni[0], list(lv.child_ne[0])))
    return out


def _merge_level_ws(sz, lv, chunk=None):
    """Working set of merging ``chunk`` nodes of a level at once (largest nodes first)."""
    sizes = sorted((sz.merge_ws(ne, ni, ch) for ne, ni, ch in zip(lv.ne, lv.ni, lv.child_ne)),
                   reverse=True) if not isinstance(lv.ne, _Rep) else None
    if sizes is None:
        one = sz.merge_ws(lv.ne.value, lv.ni.value, lv.child_ne.value)
        return one * (lv.count if chunk is None else min(chunk, lv.count)), one
    n = len(sizes) if chunk is None else min(chunk, len(sizes))
    return sum(sizes[:n]), sizes[0]


def _none_peak(geo, sz, b, cap):
    peak = b * sz.leaf_ws()
    for lv in geo.internal_levels_bottom_up():
        _, one = _merge_level_ws(sz, lv, 1)
        peak = max(peak, one)
    return peak


def _leaf_peak(geo, sz, b):
    local = b * sz.leaf_ws()
    resident = geo.n_leaves * (sz.leaf_item("T") + sz.leaf_item("h"))
    peak = max(local, resident)
    for lv in geo.internal_levels_bottom_up():
        _, one = _merge_level_ws(sz, lv, 1)
        peak = max(peak, resident + one)
        resident = _total(lv.ne, lambda ne: sz.node_item("T", ne, 0) + sz.node_item("h", ne, 0))
    return peak


def _subtree_phase_peaks(geo, sz, s):
    """(upward peak, downward peak) of processing one depth-s subtree."""
    n_leaf = 2 ** (geo.dim * s)
    lv = _sub_levels(geo, s)
    up = n_leaf * sz.leaf_ws()
    for per, ne, ni, ch in lv:
        up = max(up, per * sz.merge_ws(ne, ni, ch))
    keep_leaf = n_leaf * (sz.leaf_item("Y") + sz.leaf_item("v"))
    keep_nodes = sum(per * (sz.node_item("S", ne, ni) + sz.node_item("gt", ne, ni))
                     for per, ne, ni, _ in lv)
    trans = n_leaf * (sz.leaf_ws() - sz.leaf_item("Y") - sz.leaf_item("v"))
    for per, ne, ni, ch in lv:
        trans = max(trans, per * sz.merge_ws(ne, ni, ch))
    down = keep_leaf + keep_nodes + trans + n_leaf * (sz.leaf_item("g") + sz.leaf_item("u"))
    return up, down


def _top_schedule(geo, sz, s, cap):
    """Merges above the subtree roots: which levels keep ``S, g~`` resident.

    Levels are kept greedily from the bottom while the kept blocks plus the
    largest remaining merge still fit; the others are offloaded and brought
    back for the downward pass.  Returns ``(keep, peak)`` with ``keep``
    mapping depth to a flag.
    """
    d0 = geo.L - s
    n_sub = 2 ** (geo.dim * d0)
    ne_s = _root_ne(geo, s)
    th = n_sub * (sz.node_item("T", ne_s, 0) + sz.node_item("h", ne_s, 0))
    levels = geo.internal_levels_bottom_up(top=0, bottom=d0 - 1)
    ones = [_merge_level_ws(sz, lv, 1)[1] for lv in levels]
    kept, peak, keep, ok = 0.0, th, {}, True
    for i, lv in enumerate(levels):
        peak = max(peak, kept + th + ones[i])
        th = _total(_pairs(lv), lambda t: sz.node_item("T", t[0], 0) + sz.node_item("h", t[0], 0))
        sg = _total(_pairs(lv), lambda t: sz.node_item("S", *t) + sz.node_item("gt", *t))
        rest = max(ones[i + 1:], default=0.0)
        ok = ok and kept + sg + th + rest <= cap
        keep[lv.depth] = ok
        if ok:
            kept += sg
    return keep, peak


def _subtree_peak(geo, sz, s, cap=math.inf):
    up, down = _subtree_phase_peaks(geo, sz, s)
    if s == geo.L:
        return max(up, down)
    n_sub = 2 ** (geo.dim * (geo.L - s))
    ne_s = _root_ne(geo, s)
    retained = n_sub * (sz.node_item("T", ne_s, 0) + sz.node_item("h", ne_s, 0))
    _, top = _top_schedule(geo, sz, s, cap)
    return max(up + retained, down, top)


def _root_ne(geo, s):
    """Exterior size of a subtree root of depth s."""
    if s == 0:
        return geo.levels[geo.L - 1].child_ne[0][0]
    return geo.levels[geo.L - s].ne[0]


def _fused_peak(geo, sz):
    """Everything resident: all leaf outputs, all node ``S, g~`` and one merge."""
    n = geo.n_leaves
    peak = n * sz.leaf_ws()
    resident = n * sum(sz.leaf_item(k) for k in "YvTh")
    for lv in geo.internal_levels_bottom_up():
        _, one = _merge_level_ws(sz, lv, 1)
        peak = max(peak, resident + one)
        resident += _total(_pairs(lv), lambda t: sz.node_item("S", *t) + sz.node_item("gt", *t))
    return max(peak, resident + n * (sz.leaf_item("g") + sz.leaf_item("u")))


# ---------------------------------------------------------------------------
# transfer ledger
# ---------------------------------------------------------------------------

@dataclass
class TransferLedger:
    events: list = field(default_factory=list)
    computes: list = field(default_factory=list)

    def transfer(self, stage, direction, nbytes, tag):
        if nbytes:
            self.events.append({"stage": stage, "direction": direction,
                                "bytes": int(nbytes), "tag": tag})

    def compute(self, stage, kind, flops, recompute=False):
        self.computes.append({"stage": stage, "kind": kind, "flops": float(flops),
                              "recompute": bool(recompute)})

    def total(self, direction):
        return sum(e["bytes"] for e in self.events if e["direction"] == direction)

    @property
    def bytes_in(self):
        return self.total(H2D)

    @property
    def bytes_out(self):
        return self.total(D2H)

    @property
    def recomputed_flops(self):
        return sum(c["flops"] for c in self.computes if c["recompute"])


class _Arena:
    def __init__(self, capacity):
        self.capacity = capacity
        self.resident = 0.0
        self.peak = 0.0

    def hold(self, nbytes):
        self.resident += nbytes

    def release(self, nbytes):
        self.resident = max(0.0, self.resident - nbytes)

    def check(self, stage, transient=0.0):
        need = self.resident + transient
        self.peak = max(self.peak, need)
        if need > self.capacity:
            raise PlanError(f"stage {stage!r} needs {need:.4g} B on the device but the "
                            f"capacity is {self.capacity:.4g} B")


# ---------------------------------------------------------------------------
# kernels used by execute (host-side; the arena only tracks residency)
# ---------------------------------------------------------------------------

class _Runner:
    def __init__(self, tree, problem):
        self.tree, self.problem = tree, problem
        self.ops = leaf_operators(tree.p, tree.dim, problem.variant, problem.operator_eta)
        self.q, self.variant = tree.q, problem.variant
        self.loc, self.arts, self.kept, self.g, self.u = {}, {}, {}, {}, {}

    def local(self, ids):
        for i in ids:
            leaf = self.tree.nodes[i]
            op = factor_leaf(leaf, self.problem, self.ops)
            f = self.problem.source_at(leaf_cheb_points(leaf, self.tree.p))
            v, h = op.particular(np.asarray(f))
            self.loc[i] = (op, v, h)

    def _bop(self, c):
        if c in self.kept:
            return self.kept[c]
        node = self.tree.nodes[c]
        if node.is_leaf:
            op, _, h = self.loc[c]
            return BoundaryOp(op.T, h, leaf_faces(node, self.tree.dim), c)
        art = self.arts[c]
        return BoundaryOp(art.T, art.h, art.faces, c)

    def merge(self, ids):
        root = self.tree.root.node_id
        for i in ids:
            node = self.tree.nodes[i]
            keep_T = i != root or self.problem.closes_at_root
            self.arts[i] = merge_nodes([self._bop(c) for c in node.children], self.q,
                                       self.variant, node_id=i, keep_T=keep_T)

    def keep_top(self, i):
        art = self.arts[i]
        self.kept[i] = BoundaryOp(art.T, art.h, art.faces, i)

    def drop(self, leaf_ids=(), node_ids=()):
        for i in leaf_ids:
            self.loc.pop(i, None)
        for i in node_ids:
            self.arts.pop(i, None)

    def root_data(self):
        tree = self.tree
        if tree.root.is_leaf:
            faces = leaf_faces(tree.root, tree.dim)
        else:
            faces = self.arts[tree.root.node_id].faces
        pts, nrm = boundary_points(tree.domain, faces, tree.q)
        if self.problem.closes_at_root:
            art = self.arts[tree.root.node_id]
            return self.problem.root_closure(art.T, art.h, pts, nrm)[0]
        return self.problem.boundary_data(pts, nrm)

    def down(self, ids):
        for i in ids:
            parts = self.arts[i].child_data(self.g.pop(i))
            for c, gc in zip(self.tree.nodes[i].children, parts):
                self.g[c] = gc

    def reconstruct(self, ids):
        for i in ids:
            op, v, _ = self.loc[i]
            self.u[i] = op.Y @ self.g[i] + v

    def field(self):
        vals = np.array([self.u[n.node_id] for n in self.tree.leaves])
        return SolutionField(tree=self.tree, values=vals, variant=self.variant)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, plan, geo, sz, runner=None):
        self.plan, self.geo, self.sz, self.run = plan, geo, sz, runner
        self.ledger = TransferLedger()
        self.root_closure = runner is not None and runner.problem.closes_at_root
        self.arena = _Arena(plan.budget.device_capacity)

    # helpers -----------------------------------------------------------------
    def xfer(self, stage, direction, nbytes, tag):
        self.ledger.transfer(stage, direction, nbytes, tag)

    def leaf_ranges(self, size):
        ids = self.geo.leaf_ids()
        n = self.geo.n_leaves
        for i in range(0, n, size):
            j = min(i + size, n)
            yield j - i, (None if ids is None else ids[i:j])

    def level_totals(self, lv, kinds):
        sz = self.sz
        return sum(_total(_pairs(lv), lambda t, k=k: sz.node_item(k, *t)) for k in kinds)

    def merge_level(self, stage, lv, resident_extra=0.0, recompute=False):
        sz = self.sz
        _, one = _merge_level_ws(sz, lv, 1)
        self.arena.check(stage, one + resident_extra)
        self.ledger.compute(stage, "merge",
                            _total(_pairs(lv), lambda t: sz.merge_flops(*t)), recompute)
        if self.run is not None:
            self.run.merge(lv.ids)

    def root_g_bytes(self):
        lv0 = self.geo.levels[0]
        ne = lv0.ne[0] if lv0.count else self.sz.nb
        return ne * self.sz.w

    # strategies --------------------------------------------------------------
    def run_none(self):
        sz, geo, plan = self.sz, self.geo, self.plan
        b = plan.batch_size
        for n, ids in self.leaf_ranges(b):
            self.xfer("local", H2D, n * sz.leaf_inputs(), "coeffs,f")
            self.arena.check("local", n * sz.leaf_ws())
            self.ledger.compute("local", "local_solve", n * sz.leaf_flops())
            if self.run is not None:
                self.run.local(ids)
            self.xfer("local", D2H, n * sum(sz.leaf_item(k) for k in "YvTh"), "Y,v,T,h")
        below_T = geo.n_leaves * (sz.leaf_item("T") + sz.leaf_item("h"))
        for lv in geo.internal_levels_bottom_up():
            self.xfer(f"merge:{lv.depth}", H2D, below_T, "T,h(children)")
            self.merge_level(f"merge:{lv.depth}", lv)
            kinds = ("T", "h", "S", "gt")
            out = self.level_totals(lv, kinds)
            if lv.depth == 0 and not self.root_closure:
                out -= self.level_totals(lv, ("T",))
            self.xfer(f"merge:{lv.depth}", D2H, out, "T,h,S,g~")
            below_T = self.level_totals(lv, ("T", "h"))
        self._boundary_data()
        for lv in reversed(geo.internal_levels_bottom_up()):
            stage = f"down:{lv.depth}"
            self.xfer(stage, H2D, self.level_totals(lv, ("S", "gt", "g")), "S,g~,g")
            self.ledger.compute(stage, "down", _total(_pairs(lv), lambda t: sz.down_flops(*t)))
            if self.run is not None:
                self.run.down(lv.ids)
            self.xfer(stage, D2H, _total(lv.child_ne, lambda ch: sum(ch)) * sz.w, "g(children)")
        for n, ids in self.leaf_ranges(b):
            self.xfer("reconstruct", H2D, n * sum(sz.leaf_item(k) for k in "Yvg"), "Y,v,g")
            self.arena.check("reconstruct", n * sum(sz.leaf_item(k) for k in "Yvgu"))
            self.ledger.compute("reconstruct", "reconstruct", n * sz.reconstruct_flops())
            if self.run is not None:
                self.run.reconstruct(ids)
            self.xfer("reconstruct", D2H, n * sz.leaf_item("u"), "u")

    def _boundary_data(self):
        # the root boundary data is an input of the downward pass
        self.xfer("down", H2D, self.root_g_bytes(), "g(root)")
        if self.run is not None:
            self.run.g[self.run.tree.root.node_id] = self.run.root_data()

    def run_fused(self):
        """Everything resident: inputs in, solution out."""
        sz, geo = self.sz, self.geo
        n = geo.n_leaves
        self.xfer("local", H2D, n * sz.leaf_inputs(), "coeffs,f")
        self.xfer("down", H2D, self.root_g_bytes(), "g(root)")
        self.arena.hold(n * sum(sz.leaf_item(k) for k in "YvTh"))
        self.arena.check("local", n * (sz.leaf_ws() - sum(sz.leaf_item(k) for k in "YvTh")))
        self.ledger.compute("local", "local_solve", n * sz.leaf_flops())
        if self.run is not None:
            self.run.local(self.geo.leaf_ids())
        for lv in geo.internal_levels_bottom_up():
            self.merge_level(f"merge:{lv.depth}", lv)
            self.arena.hold(self.level_totals(lv, ("S", "gt", "T", "h")))
        if self.run is not None:
            self.run.g[self.run.tree.root.node_id] = self.run.root_data()
        for lv in reversed(geo.internal_levels_bottom_up()):
            self.ledger.compute(f"down:{lv.depth}", "down",
                                _total(_pairs(lv), lambda t: sz.down_flops(*t)))
            if self.run is not None:
                self.run.down(lv.ids)
        self.arena.check("reconstruct", n * (sz.leaf_item("g") + sz.leaf_item("u")))
        self.ledger.compute("reconstruct", "reconstruct", n * sz.reconstruct_flops())
        if self.run is not None:
            self.run.reconstruct(self.geo.leaf_ids())
        self.xfer("reconstruct", D2H, n * sz.leaf_item("u"), "u")

    def run_leaf(self):
        if self.plan.fused:
            return self.run_fused()
        sz, geo, plan = self.sz, self.geo, self.plan
        b = plan.batch_size
        for n, ids in self.leaf_ranges(b):
            self.xfer("local", H2D, n * sz.leaf_inputs(), "coeffs,f")
            self.arena.check("local", n * sz.leaf_ws())
            self.ledger.compute("local", "local_solve", n * sz.leaf_flops())
            if self.run is not None:
                self.run.local(ids)
            self.xfer("local", D2H, n * (sz.leaf_item("T") + sz.leaf_item("h")), "T,h")
        # all leaf T, h go back to the device; merges run there
        resident = geo.n_leaves * (sz.leaf_item("T") + sz.leaf_item("h"))
        self.xfer("merge", H2D, resident, "T,h(leaves)")
        self.arena.hold(resident)
        for lv in geo.internal_levels_bottom_up():
            stage = f"merge:{lv.depth}"
            self.merge_level(stage, lv)
            self.arena.release(resident)
            resident = self.level_totals(lv, ("T", "h"))
            self.arena.hold(resident)
            self.xfer(stage, D2H, self.level_totals(lv, ("S", "gt")), "S,g~")
        self.arena.release(resident)
        if self.run is not None:
            # Y and v were deleted after the first local solve
            self.run.drop(leaf_ids=self.geo.leaf_ids())
        self._boundary_data()
        for lv in reversed(geo.internal_levels_bottom_up()):
            stage = f"down:{lv.depth}"
            self.xfer(stage, H2D, self.level_totals(lv, ("S", "gt")), "S,g~")
            self.arena.check(stage, self.level_totals(lv, ("S", "gt", "g"))
                             + _total(lv.child_ne, lambda ch: sum(ch)) * sz.w)
            self.ledger.compute(stage, "down", _total(_pairs(lv), lambda t: sz.down_flops(*t)))
            if self.run is not None:
                self.run.down(lv.ids)
        self.xfer("down", D2H, geo.n_leaves * sz.leaf_item("g"), "g(leaves)")
        for n, ids in self.leaf_ranges(b):
            self.xfer("reconstruct", H2D, n * (sz.leaf_inputs() + sz.leaf_item("g")),
                      "coeffs,f,g")
            self.arena.check("reconstruct", n * (sz.leaf_ws() + sz.leaf_item("g")
                                                 + sz.leaf_item("u")))
            self.ledger.compute("reconstruct", "local_solve", n * sz.leaf_flops(), True)
            self.ledger.compute("reconstruct", "reconstruct", n * sz.reconstruct_flops())
            if self.run is not None:
                self.run.local(ids)
                self.run.reconstruct(ids)
            self.xfer("reconstruct", D2H, n * sz.leaf_item("u"), "u")

    def _subtree_nodes(self, root_id):
        """(leaf ids, internal levels bottom-up as id lists) of one subtree."""
        tree = self.run.tree
        root = tree.nodes[root_id]
        leaves = [n.node_id for n in tree.subtree_leaves(root)]
        levels, frontier = [], [root]
        while frontier and not frontier[0].is_leaf:
            levels.append([n.node_id for n in frontier])
            frontier = [tree.nodes[c] for n in frontier for c in n.children]
        return leaves, levels[::-1]

    def run_subtree(self):
        if self.plan.fused:
            return self.run_fused()
        sz, geo, plan = self.sz, self.geo, self.plan
        s, d0 = plan.subtree_depth, plan.subtree_root_depth
        n_leaf = 2 ** (geo.dim * s)
        lvs = _sub_levels(geo, s)
        up, down = _subtree_phase_peaks(geo, sz, s)
        ne_s = _root_ne(geo, s)
        top_keep = sz.node_item("T", ne_s, 0) + sz.node_item("h", ne_s, 0)
        roots = (None if self.run is None
                 else [n.node_id for n in self.run.tree.levels[d0]])
        sub_flops = sum(per * sz.merge_flops(ne, ni) for per, ne, ni, _ in lvs)
        for j in range(plan.n_subtrees):
            stage = "subtree-up"
            self.xfer(stage, H2D, n_leaf * sz.leaf_inputs(), "coeffs,f")
            self.arena.check(stage, up)
            self.ledger.compute(stage, "local_solve", n_leaf * sz.leaf_flops())
            self.ledger.compute(stage, "merge", sub_flops)
            if self.run is not None:
                leaves, levels = self._subtree_nodes(roots[j])
                self.run.local(leaves)
                for ids in levels:
                    self.run.merge(ids)
                self.run.keep_top(roots[j])
                self.run.drop(leaf_ids=leaves, node_ids=[i for ids in levels for i in ids])
            self.arena.hold(top_keep)
        # merges above the subtree roots run on the device; S, g~ stay there
        # while they fit and are offloaded otherwise
        keep, _ = _top_schedule(geo, sz, s, plan.budget.device_capacity)
        top = geo.internal_levels_bottom_up(top=0, bottom=d0 - 1)
        kept = 0.0
        for lv in top:
            stage = f"merge:{lv.depth}"
            self.merge_level(stage, lv)
            if keep[lv.depth]:
                kept += self.level_totals(lv, ("S", "gt"))
            else:
                self.xfer(stage, D2H, self.level_totals(lv, ("S", "gt")), "S,g~")
            self.arena.release(self.arena.resident)
            self.arena.hold(kept + self.level_totals(lv, ("T", "h")))
        self.arena.release(self.arena.resident)
        self._boundary_data()
        for lv in reversed(top):
            stage = f"down:{lv.depth}"
            if not keep[lv.depth]:
                self.xfer(stage, H2D, self.level_totals(lv, ("S", "gt")), "S,g~")
            self.ledger.compute(stage, "down", _total(_pairs(lv), lambda t: sz.down_flops(*t)))
            if self.run is not None:
                self.run.down(lv.ids)
        g_roots = plan.n_subtrees * ne_s * sz.w
        self.xfer("down", D2H, g_roots, "g(subtree roots)")
        self.arena.resident = 0.0
        down_flops = sum(per * sz.down_flops(ne, ni) for per, ne, ni, _ in lvs)
        for j in range(plan.n_subtrees):
            stage = "subtree-down"
            self.xfer(stage, H2D, n_leaf * sz.leaf_inputs() + ne_s * sz.w, "coeffs,f,g")
            self.arena.check(stage, down)
            self.ledger.compute(stage, "local_solve", n_leaf * sz.leaf_flops(), True)
            self.ledger.compute(stage, "merge", sub_flops, True)
            self.ledger.compute(stage, "down", down_flops)
            self.ledger.compute(stage, "reconstruct", n_leaf * sz.reconstruct_flops())
            if self.run is not None:
                leaves, levels = self._subtree_nodes(roots[j])
                self.run.local(leaves)
                for ids in levels:
                    self.run.merge(ids)
                for ids in reversed(levels):
                    self.run.down(ids)
                self.run.reconstruct(leaves)
                self.run.drop(leaf_ids=leaves, node_ids=[i for ids in levels for i in ids])
            self.xfer(stage, D2H, n_leaf * sz.leaf_item("u"), "u")


def _pairs(lv):
    if isinstance(lv.ne, _Rep):
        return _Rep((lv.ne.value, lv.ni.value), lv.count)
    return list(zip(lv.ne, lv.ni))


def _engine(plan, tree, problem=None):
    geo = _Geometry(tree, plan.variant)
    sz = _Sizes(plan.dim, plan.p, plan.variant, plan.n_coeff_fields, plan.width,
                plan.is_complex)
    runner = None if problem is None else _Runner(tree, problem)
    return _Engine(plan, geo, sz, runner)


def _run(eng):
    {"none": eng.run_none, "leaf": eng.run_leaf, "subtree": eng.run_subtree}[eng.plan.strategy]()
    return eng


def execute(plan: ExecutionPlan, tree, problem):
    """Run the plan with the real kernels; returns ``(SolutionField, TransferLedger)``."""
    if not isinstance(tree, DiscretizationTree):
        raise TypeError("execute needs a DiscretizationTree; use dry_run for shapes")
    if tree.dim != plan.dim or tree.depth != plan.L or tree.p != plan.p:
        raise ValueError("plan was made for a different tree")
    t0 = time.perf_counter()
    eng = _run(_engine(plan, tree, problem))
    eng.ledger.wall_seconds = time.perf_counter() - t0
    eng.ledger.peak_device = eng.arena.peak
    return eng.run.field(), eng.ledger


def dry_run(plan: ExecutionPlan, tree_or_shape):
    """Byte and flop accounting of the plan without running any kernels."""
    t0 = time.perf_counter()
    eng = _run(_engine(plan, tree_or_shape))
    eng.ledger.wall_seconds = time.perf_counter() - t0
    eng.ledger.peak_device = eng.arena.peak
    return eng.ledger


def ledger_report(ledger: TransferLedger, plan: ExecutionPlan | None = None):
    """Aggregate record: totals, recomputed flops and per-stage bytes."""
    stages = {}
    for e in ledger.events:
        st = stages.setdefault(e["stage"], {"bytes_in": 0, "bytes_out": 0})
        st["bytes_in" if e["direction"] == H2D else "bytes_out"] += e["bytes"]
    rec = {"bytes_in": ledger.bytes_in, "bytes_out": ledger.bytes_out,
           "bytes_total": ledger.bytes_in + ledger.bytes_out,
           "recomputed_flops": ledger.recomputed_flops,
           "total_flops": sum(c["flops"] for c in ledger.computes),
           "stages": stages,
           "wall_seconds": float(getattr(ledger, "wall_seconds", 0.0)),
           "peak_device_bytes": float(getattr(ledger, "peak_device", 0.0))}
    if plan is not None:
        rec.update(strategy=plan.strategy, L=plan.L, p=plan.p,
                   N=plan.n_leaves * plan.p ** plan.dim, plan=plan.to_dict())
    return rec


CSV_FIELDS = ("strategy", "L", "p", "N", "bytes_in", "bytes_out", "recomputed_flops",
              "wall_seconds")


def report_csv(records):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore")
    w.writeheader()
    for r in records:
        w.writerow(r)
    return buf.getvalue()


def report_json(records):
    return json.dumps(records, indent=1, sort_keys=True)
