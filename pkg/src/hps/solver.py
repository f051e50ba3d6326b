"""End-to-end solver: local solves, merges, root closure and downward pass.

The work is split into an operator phase (leaf factorizations, interface
factorizations, ``T`` and ``S``) and a data phase (particular solutions,
``h`` and ``g~``), so one factorization serves many right-hand sides.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .downpass import SolutionField, propagate
from .local_solve import factor_leaf, leaf_system
from .mesh import leaf_cheb_points
from .merge import (BlockAssembler, BoundaryOp, DenseSolver, ItISolver, MergeArtifact,
                    MergeError, leaf_faces, merge_layout, merge_nodes, node_faces)
from .spectral import faces_for_dim, face_local_axes, gauss_legendre_1d, leaf_operators


def boundary_points(domain, faces, q):
    """Gauss points and outward normals for a node boundary given as face panel lists."""
    dim = domain.dim
    xg, _ = gauss_legendre_1d(q)
    pts, nrm = [], []
    for (axis, side), panels in zip(faces_for_dim(dim), faces):
        la = face_local_axes(axis, dim)
        n = np.zeros(dim)
        n[axis] = 1.0 if side else -1.0
        for level, coords in panels:
            h = domain.side / 2 ** level
            locs = [domain.lo[a] + h * (c + 0.5 * (xg + 1.0)) for a, c in zip(la, coords)]
            mesh = np.meshgrid(*locs, indexing="ij")
            P = np.empty((q ** (dim - 1), dim))
            P[:, axis] = domain.hi[axis] if side else domain.lo[axis]
            for a, m in zip(la, mesh):
                P[:, a] = m.ravel()
            pts.append(P)
            nrm.append(np.tile(n, (len(P), 1)))
    return np.vstack(pts), np.vstack(nrm)


class HPSSolver:
    """Fast direct solver for one problem on one tree.

    ``factor()`` builds all source-independent operators; ``solve()`` then
    costs a data pass plus a downward pass and may be repeated with other
    sources or boundary data.
    """

    def __init__(self, tree, problem, lazy_root=None):
        if tree.dim != problem.dim:
            raise ValueError("tree and problem dimensions differ")
        self.tree = tree
        self.problem = problem
        self.variant = problem.variant
        self.ops = leaf_operators(tree.p, tree.dim, problem.variant, problem.operator_eta)
        self.lazy_root = (tree.dim == 3) if lazy_root is None else lazy_root
        self.leaf_ops = None
        self.artifacts = {}
        self._root_T = None
        self._factored = False

    @property
    def need_root_T(self):
        return self.problem.closes_at_root

    # -- operator phase ------------------------------------------------------
    def factor(self):
        tree = self.tree
        self.leaf_ops = [factor_leaf(leaf, self.problem, self.ops) for leaf in tree.leaves]
        bops = {leaf.node_id: BoundaryOp(op.T, None, leaf_faces(leaf, tree.dim), leaf.node_id)
                for leaf, op in zip(tree.leaves, self.leaf_ops)}
        if not tree.root.is_leaf:
            for op in self.leaf_ops:
                op.T = None  # held by bops until the parent merge consumes it
        for node in tree.internal_nodes_bottom_up():
            is_root = node is tree.root
            keep_T = (not is_root) or self.need_root_T
            art = merge_nodes([bops.pop(c) for c in node.children], tree.q, self.variant,
                              node_id=node.node_id, keep_T=keep_T,
                              lazy=is_root and self.lazy_root and not keep_T,
                              with_data=False, release=True)
            self.artifacts[node.node_id] = art
            bops[node.node_id] = BoundaryOp(art.T, None, art.faces, node.node_id)
            if not is_root:
                art.T = None  # only the parent merge needs it
        if tree.root.is_leaf:
            self._root_T = self.leaf_ops[0].T
        else:
            self._root_T = self.artifacts[tree.root.node_id].T
        self._factored = True
        return self

    # -- data phase ------------------------------------------------------------
    def upward(self, sources=None):
        """Particular solutions and outgoing data for the given per-leaf sources.

        ``sources`` defaults to the problem's source sampled on each leaf.
        Returns ``(v_list, h_root)``.
        """
        tree = self.tree
        if sources is None:
            sources = [self.problem.source_at(leaf_cheb_points(leaf, tree.p))
                       for leaf in tree.leaves]
        vs, hs = {}, {}
        for leaf, op, f in zip(tree.leaves, self.leaf_ops, sources):
            v, h = op.particular(np.asarray(f))
            vs[leaf.node_id] = v
            hs[leaf.node_id] = h
        for node in tree.internal_nodes_bottom_up():
            art = self.artifacts[node.node_id]
            hs[node.node_id] = art.update_data([hs.pop(c) for c in node.children])
        return [vs[leaf.node_id] for leaf in tree.leaves], hs[tree.root.node_id]

    def root_faces(self):
        if self.tree.root.is_leaf:
            return leaf_faces(self.tree.root, self.tree.dim)
        return self.artifacts[self.tree.root.node_id].faces

    def root_boundary_data(self, h_root=None):
        """Boundary data on the root panels (or the root closure solve)."""
        pts, nrm = boundary_points(self.tree.domain, self.root_faces(), self.tree.q)
        if self.problem.closes_at_root:
            return self.problem.root_closure(self._root_T, h_root, pts, nrm)[0]
        return self.problem.boundary_data(pts, nrm)

    def solve(self, sources=None, g_root=None):
        """Solve and return a :class:`SolutionField`."""
        if not self._factored:
            self.factor()
        vs, h_root = self.upward(sources)
        if g_root is None:
            g_root = self.root_boundary_data(h_root)
        return self.reconstruct(g_root, vs)

    def solve_once(self, sources=None, recompute=False):
        """Single solve with fused operator and data passes, for large 3D trees.

        Nodes are merged depth first with their outgoing data, so no ``B``
        blocks are kept and only one root child's ``T`` is alive at a time.
        The root interface is assembled incrementally and ``C g`` is formed
        on the fly from the (known) root boundary data, so the root keeps
        neither ``S`` nor ``C``.  The result equals :meth:`solve` up to
        rounding.  Root closures (absorbing or converted impedance data) need
        the root operator and fall back to :meth:`solve`.

        With ``recompute`` each root child's subtree is discarded once it has
        been folded into the root system and rebuilt, one child at a time,
        for the downward pass.  This doubles the local and merge work but
        keeps at most one subtree's ``S`` blocks and leaf ``Y`` alive.
        """
        tree, problem = self.tree, self.problem
        if tree.root.is_leaf or problem.closes_at_root:
            return self.solve(sources)
        dim, q, variant = tree.dim, tree.q, self.variant
        src = None if sources is None else dict(zip((n.node_id for n in tree.leaves), sources))
        leaf_data, arts = {}, {}

        def build(node):
            if node.is_leaf:
                op = factor_leaf(node, problem, self.ops)
                f = (problem.source_at(leaf_cheb_points(node, tree.p)) if src is None
                     else src[node.node_id])
                v, h = op.particular(np.asarray(f))
                leaf_data[node.node_id] = (op.Y, v)
                return BoundaryOp(op.T, h, leaf_faces(node, dim), node.node_id)
            kids = [build(tree.nodes[c]) for c in node.children]
            art = merge_nodes(kids, q, variant, node_id=node.node_id, keep_T=True,
                              with_data=True, release=True)
            del kids
            T, art.T, art.B = art.T, None, None
            arts[node.node_id] = art
            return BoundaryOp(T, art.h, art.faces, node.node_id)

        root = tree.root
        child_faces = [node_faces(tree, tree.nodes[c]) for c in root.children]
        layout = merge_layout(child_faces, q, variant)
        pts, nrm = boundary_points(tree.domain, layout.parent_faces, q)
        g_root = np.asarray(problem.boundary_data(pts, nrm))
        asm = None
        for c, cid in enumerate(root.children):
            bop = build(tree.nodes[cid])
            if bop.faces != child_faces[c]:
                raise MergeError(f"panel layout of node {cid} differs from its geometry",
                                 root.node_id)
            if asm is None:
                asm = BlockAssembler(layout, np.result_type(bop.T, bop.h, g_root),
                                     need_ext_rows=False, apply_C_to=g_root)
            asm.add(c, bop, release=True)
            del bop
            if recompute:
                leaf_data.clear()
                arts.clear()
        blocks = asm.finish()
        del asm
        solver = (ItISolver if variant == "iti" else DenseSolver)(blocks.D, root.node_id, True)
        blocks.D = None
        g_int = -solver.solve(blocks.Cg + blocks.h_int_child)
        art = MergeArtifact(node_id=root.node_id, child_ids=list(root.children), layout=layout,
                            solver=None, gtilde=g_int)
        art.extra.update(D_size=layout.n_int, cond=solver.cond)
        del solver, blocks
        self.root_info = dict(art.extra)
        if not recompute:
            arts[root.node_id] = art
            g_leaves = propagate(tree, arts, g_root)
            vals = [leaf_data[n.node_id][0] @ g + leaf_data[n.node_id][1]
                    for n, g in zip(tree.leaves, g_leaves)]
            return SolutionField(tree=tree, values=np.array(vals), variant=variant)
        u = {}

        def down(node, g):
            if node.is_leaf:
                Y, v = leaf_data.pop(node.node_id)
                u[node.node_id] = Y @ g + v
                return
            parts = arts.pop(node.node_id).child_data(g)
            for cid, gc in zip(node.children, parts):
                down(tree.nodes[cid], gc)

        for cid, gc in zip(root.children, art.child_data(g_root)):
            build(tree.nodes[cid])
            down(tree.nodes[cid], gc)
        vals = np.array([u[n.node_id] for n in tree.leaves])
        return SolutionField(tree=tree, values=vals, variant=variant)

    def solve_transpose(self, ubar):
        """Transpose of the linear map ``sources -> solution`` at fixed boundary data.

        ``ubar`` holds one cotangent vector per leaf (grid order); the result
        is one source cotangent per leaf, zero on the leaf boundary points
        where sources are not used.  With root closures the root boundary
        data depends on the sources and is differentiated too.
        """
        if not self._factored:
            self.factor()
        tree = self.tree
        ubar = [np.asarray(u) for u in ubar]
        gbar = {leaf.node_id: op.Y.T @ u
                for leaf, op, u in zip(tree.leaves, self.leaf_ops, ubar)}
        gtbar = {}
        for node in tree.internal_nodes_bottom_up():
            art = self.artifacts[node.node_id]
            gbar[node.node_id], gtbar[node.node_id] = art.child_data_T(
                [gbar.pop(c) for c in node.children])
        root = tree.root.node_id
        hbar = {}
        if self.problem.closes_at_root:
            pts, nrm = boundary_points(tree.domain, self.root_faces(), tree.q)
            h0 = np.zeros(self._root_T.shape[0], dtype=self._root_T.dtype)
            _, M, c = self.problem.root_closure(self._root_T, h0, pts, nrm)
            hbar[root] = c * sla.solve(M.T, gbar[root])
        else:
            hbar[root] = None
        for level in tree.levels:
            for node in level:
                if node.is_leaf:
                    continue
                art = self.artifacts[node.node_id]
                parts = art.update_data_T(hbar.pop(node.node_id), gtbar.pop(node.node_id))
                for c, hb in zip(node.children, parts):
                    hbar[c] = hb
        return [op.particular_T(u, hbar[leaf.node_id])
                for leaf, op, u in zip(tree.leaves, self.leaf_ops, ubar)]

    def reconstruct(self, g_root, vs):
        tree = self.tree
        if tree.root.is_leaf:
            g_leaves = [np.asarray(g_root)]
        else:
            g_leaves = propagate(tree, self.artifacts, g_root)
        vals = [op.Y @ g + v for op, g, v in zip(self.leaf_ops, g_leaves, vs)]
        return SolutionField(tree=tree, values=np.array(vals), variant=self.variant)


def solve(tree, problem, **kw):
    """One-shot convenience wrapper."""
    return HPSSolver(tree, problem, **kw).solve()


def exact_on_tree(tree, fn):
    return np.array([fn(leaf_cheb_points(leaf, tree.p)) for leaf in tree.leaves])


def leaf_source_samples(tree, problem):
    return [problem.source_at(leaf_cheb_points(leaf, tree.p)) for leaf in tree.leaves]


__all__ = ["HPSSolver", "solve", "boundary_points", "exact_on_tree", "leaf_system"]
