"""Hierarchical Schur-complement merges of Poincare--Steklov operators.

A node's boundary is described face by face (faces in the order of
:data:`hps.spectral.FACES_2D` / ``FACES_3D``).  Each face is a list of Gauss
panels; a panel is ``(level, coords)`` with integer ``coords`` in the face's
local axes at that level.  Panels on a face are kept in recursive quadrant
(Morton) order with the first local axis most significant, which is exactly
the order produced by concatenating children's faces.

Merging ``2^d`` siblings eliminates the data on the interior interfaces.
Sibling pairs are numbered 5-8 in 2D and 9-20 in 3D:

* 2D: 5 = a|b, 6 = b|c, 7 = c|d, 8 = d|a
* 3D: 9-12 as 5-8 for the lower layer, 13-16 for the upper layer,
  17-20 = a|e, b|f, c|g, d|h

DtN merges use one unknown per interface point (the shared Dirichlet value)
in section order.  ItI merges carry the incoming impedance data on each side
separately, ordered ``[g5a, g8a, g6c, g7c, g5b, g6b, g7d, g8d]`` so that the
interface matrix is ``I + [[0, D12], [D21, 0]]``.  The merged boundary is laid
out in the parent's own face order, so artifacts nest recursively.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

from .spectral import child_offsets, face_local_axes, face_projection_ops, faces_for_dim

LETTERS = "abcdefgh"

SECTIONS_2D = {5: ("a", "b"), 6: ("b", "c"), 7: ("d", "c"), 8: ("a", "d")}
SECTIONS_3D = {9: ("a", "b"), 10: ("b", "c"), 11: ("d", "c"), 12: ("a", "d"),
               13: ("e", "f"), 14: ("f", "g"), 15: ("h", "g"), 16: ("e", "h"),
               17: ("a", "e"), 18: ("b", "f"), 19: ("c", "g"), 20: ("d", "h")}
# (section, child receiving the data) in the impedance merge
ITI_SLOTS = ((5, "a"), (8, "a"), (6, "c"), (7, "c"), (5, "b"), (6, "b"), (7, "d"), (8, "d"))


class MergeError(RuntimeError):
    def __init__(self, msg, node_id=None, cond=None):
        super().__init__(msg)
        self.node_id = node_id
        self.cond = cond


# ---------------------------------------------------------------------------
# boundary geometry
# ---------------------------------------------------------------------------

def leaf_faces(node, dim):
    """One panel per face for a leaf node."""
    out = []
    for axis, _ in faces_for_dim(dim):
        la = face_local_axes(axis, dim)
        out.append([(node.depth, tuple(node.index[a] for a in la))])
    return out


def _morton(panel):
    level, coords = panel
    return tuple(sum(((c >> (level - 1 - j)) & 1) << (len(coords) - 1 - k)
                     for k, c in enumerate(coords)) for j in range(level))


def _parent_panel(panel):
    level, coords = panel
    return (level - 1, tuple(c >> 1 for c in coords))


def _has_coarser(panel, others):
    while panel[0] > 0:
        panel = _parent_panel(panel)
        if panel in others:
            return True
    return False


def common_panels(pa, pb):
    """Panels of the coarser side at each location of a shared face, Morton ordered."""
    sa, sb = set(pa), set(pb)
    out = [x for x in pa if not _has_coarser(x, sb)]
    out += [x for x in pb if x not in sa and not _has_coarser(x, sa)]
    return sorted(out, key=_morton)


def _sub_panels(panel):
    level, coords = panel
    n = len(coords)
    subs = []
    for bits in np.ndindex(*(2,) * n):
        subs.append((level + 1, tuple(2 * c + b for c, b in zip(coords, bits))))
    return subs


def _face_expansion(native, common, q, dim):
    """Sparse ``E`` (native <- common) and ``R`` (common <- native) for one face.

    Returns ``None`` when the face is unchanged.
    """
    if native == common:
        return None
    npp = q ** (dim - 1)
    c2f, f2c = face_projection_ops(q, dim)
    pos = {pnl: i for i, pnl in enumerate(native)}
    E = sp.lil_matrix((len(native) * npp, len(common) * npp))
    R = sp.lil_matrix((len(common) * npp, len(native) * npp))
    eye = np.eye(npp)
    for j, pnl in enumerate(common):
        cs = slice(j * npp, (j + 1) * npp)
        if pnl in pos:
            i = pos[pnl]
            E[i * npp:(i + 1) * npp, cs] = eye
            R[cs, i * npp:(i + 1) * npp] = eye
            continue
        subs = _sub_panels(pnl)
        if any(s not in pos for s in subs):
            raise MergeError("interface panels differ by more than one level; "
                             "enforce level restriction before merging")
        idx = [pos[s] for s in subs]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise MergeError("fine panels are not contiguous on the face")
        fs = slice(idx[0] * npp, (idx[-1] + 1) * npp)
        E[fs, cs] = c2f
        R[cs, fs] = f2c
    return E.tocsr(), R.tocsr()


def _face_children(dim, axis, side):
    """Children (indices) on the parent face, in face-local quadrant order."""
    offs = child_offsets(dim)
    la = face_local_axes(axis, dim)
    members = [c for c, b in enumerate(offs) if b[axis] == side]
    return sorted(members, key=lambda c: tuple(offs[c][a] for a in la))


def _sections(dim):
    table = SECTIONS_2D if dim == 2 else SECTIONS_3D
    offs = child_offsets(dim)
    out = {}
    for k, (lo, hi) in table.items():
        clo, chi = LETTERS.index(lo), LETTERS.index(hi)
        diff = [a for a in range(dim) if offs[clo][a] != offs[chi][a]]
        assert len(diff) == 1 and offs[clo][diff[0]] == 0
        out[k] = (clo, chi, diff[0])
    return out


def _face_index(dim, axis, side):
    return faces_for_dim(dim).index((axis, side))


# ---------------------------------------------------------------------------
# merge data structures
# ---------------------------------------------------------------------------

@dataclass
class BoundaryOp:
    """What a merge needs from a child: operator, outgoing data and panels."""

    T: np.ndarray | None
    h: np.ndarray | None
    faces: list
    node_id: int | None = None

    @property
    def n(self):
        return sum(len(f) for f in self.faces)


@dataclass
class MergeLayout:
    """Index bookkeeping of one merge, independent of numerical values."""

    dim: int
    q: int
    variant: str
    n_ext: int
    n_int: int
    in_maps: list          # per child: effective boundary position -> [ext | int] index
    out_maps: list         # per child: effective boundary position -> output row
    expand: list           # per child: (E, R) sparse pair or None
    parent_faces: list
    interface_map: dict    # section label -> slice into ext or int vector
    section_sizes: dict

    @property
    def n_side(self):
        sizes = set(self.section_sizes.values())
        return sizes.pop() if len(sizes) == 1 else None


def merge_layout(children_faces, q, variant):
    """Geometry of the merge of ``2^d`` siblings given their face panel lists."""
    nch = len(children_faces)
    dim = {4: 2, 8: 3}[nch]
    if variant == "iti" and dim != 2:
        raise ValueError("impedance merges are two-dimensional only")
    npp = q ** (dim - 1)
    faces = faces_for_dim(dim)
    secs = _sections(dim)

    eff_faces = [list(map(list, cf)) for cf in children_faces]
    for k, (clo, chi, axis) in secs.items():
        flo = _face_index(dim, axis, 1)
        fhi = _face_index(dim, axis, 0)
        pa, pb = children_faces[clo][flo], children_faces[chi][fhi]
        com = common_panels(pa, pb)
        eff_faces[clo][flo] = com
        eff_faces[chi][fhi] = com

    expand = []
    for c in range(nch):
        blocks_E, blocks_R, changed = [], [], False
        for f in range(2 * dim):
            nat, eff = children_faces[c][f], eff_faces[c][f]
            try:
                er = _face_expansion(nat, eff, q, dim)
            except MergeError as exc:
                raise MergeError(f"child {LETTERS[c]} face {f}: {exc}") from None
            if er is None:
                I = sp.identity(len(nat) * npp, format="csr")
                blocks_E.append(I)
                blocks_R.append(I)
            else:
                changed = True
                blocks_E.append(er[0])
                blocks_R.append(er[1])
        expand.append((sp.block_diag(blocks_E, format="csr"),
                       sp.block_diag(blocks_R, format="csr")) if changed else None)

    # offsets of each face within each child's effective boundary vector
    face_off = []
    for c in range(nch):
        offs, o = [], 0
        for f in range(2 * dim):
            offs.append(o)
            o += len(eff_faces[c][f]) * npp
        offs.append(o)
        face_off.append(offs)

    # exterior: parent faces in canonical order, children in face quadrant order
    ext_pos = {}
    parent_faces = []
    interface_map = {}
    n_ext = 0
    for pf, (axis, side) in enumerate(faces):
        pf_panels = []
        start = n_ext
        for c in _face_children(dim, axis, side):
            f = _face_index(dim, axis, side)
            panels = eff_faces[c][f]
            pf_panels.extend(panels)
            ext_pos[(c, f)] = n_ext
            n_ext += len(panels) * npp
        parent_faces.append(pf_panels)
        interface_map[f"face{pf}"] = slice(start, n_ext)

    # interior numbering
    int_pos = {}
    section_sizes = {}
    n_int = 0
    if variant == "dtn":
        for k, (clo, chi, axis) in secs.items():
            m = len(eff_faces[clo][_face_index(dim, axis, 1)]) * npp
            int_pos[(k, clo)] = int_pos[(k, chi)] = n_int
            interface_map[k] = slice(n_ext + n_int, n_ext + n_int + m)
            section_sizes[k] = m
            n_int += m
    else:
        for k, letter in ITI_SLOTS:
            clo, chi, axis = secs[k]
            m = len(eff_faces[clo][_face_index(dim, axis, 1)]) * npp
            c = LETTERS.index(letter)
            int_pos[(k, c)] = n_int
            interface_map[(k, letter)] = slice(n_ext + n_int, n_ext + n_int + m)
            section_sizes[k] = m
            n_int += m

    # per-child position maps
    sec_of_face = {}
    for k, (clo, chi, axis) in secs.items():
        sec_of_face[(clo, _face_index(dim, axis, 1))] = (k, chi)
        sec_of_face[(chi, _face_index(dim, axis, 0))] = (k, clo)
    in_maps, out_maps = [], []
    for c in range(nch):
        imap = np.empty(face_off[c][-1], dtype=np.intp)
        omap = np.empty(face_off[c][-1], dtype=np.intp)
        for f in range(2 * dim):
            lo, hi = face_off[c][f], face_off[c][f + 1]
            rng = np.arange(hi - lo)
            if (c, f) in ext_pos:
                imap[lo:hi] = omap[lo:hi] = ext_pos[(c, f)] + rng
                continue
            k, partner = sec_of_face[(c, f)]
            imap[lo:hi] = n_ext + int_pos[(k, c)] + rng
            if variant == "dtn":
                omap[lo:hi] = imap[lo:hi]
            else:
                # outgoing data of c on section k becomes (minus) partner's incoming
                omap[lo:hi] = n_ext + int_pos[(k, partner)] + rng
        in_maps.append(imap)
        out_maps.append(omap)

    return MergeLayout(dim=dim, q=q, variant=variant, n_ext=n_ext, n_int=n_int,
                       in_maps=in_maps, out_maps=out_maps, expand=expand,
                       parent_faces=parent_faces, interface_map=interface_map,
                       section_sizes=section_sizes)


@dataclass
class MergeBlocks:
    """Blocks of the interface system ``[A B; C D]`` and child outgoing data."""

    A: np.ndarray | None
    B: np.ndarray | None
    C: np.ndarray
    D: np.ndarray
    h_ext_child: np.ndarray | None
    h_int_child: np.ndarray | None
    layout: MergeLayout
    Cg: np.ndarray | None = None

    @property
    def interface_map(self):
        return self.layout.interface_map

    @property
    def n_side(self):
        return self.layout.n_side


class ScatteredBlocks:
    """Matrix stored as dense blocks at ``(rows, cols)`` index sets.

    Used for the root ``C`` of a lazy merge, where most of the dense matrix
    is zero.  Supports ``@`` with vectors and matrices.
    """

    def __init__(self, shape, dtype):
        self.shape = shape
        self.dtype = np.dtype(dtype)
        self.blocks = []

    def add(self, rows, cols, M):
        self.blocks.append((rows, cols, np.array(M, dtype=self.dtype)))

    def __matmul__(self, x):
        x = np.asarray(x)
        out = np.zeros((self.shape[0],) + x.shape[1:], np.result_type(self.dtype, x))
        for r, c, M in self.blocks:
            out[r] += M @ x[c]  # rows are distinct within a block
        return out

    def toarray(self):
        out = np.zeros(self.shape, self.dtype)
        for r, c, M in self.blocks:
            out[np.ix_(r, c)] += M
        return out

    @property
    def nbytes(self):
        return sum(M.nbytes for _, _, M in self.blocks)


def _effective(child, ex):
    """Child operator and data with interface faces projected to the common panels."""
    T, h = child.T, child.h
    if ex is None:
        return T, h
    E, R = ex
    Te = None if T is None else np.asarray(R @ np.asarray((E.T @ T.T).T))
    he = None if h is None else R @ h
    return Te, he


def _split_maps(layout, c):
    imap, omap = layout.in_maps[c], layout.out_maps[c]
    n_ext = layout.n_ext
    ie = np.flatnonzero(imap < n_ext)
    ii = np.flatnonzero(imap >= n_ext)
    oe = np.flatnonzero(omap < n_ext)
    oi = np.flatnonzero(omap >= n_ext)
    return (ie, imap[ie]), (ii, imap[ii] - n_ext), (oe, omap[oe]), (oi, omap[oi] - n_ext)


class BlockAssembler:
    """Incremental scatter-add of children into the blocks of one merge.

    Children may be added one at a time, so each child's ``T`` can be freed
    right after it is scattered.  With ``apply_C_to`` given, the product
    ``C g`` is accumulated instead of ``C`` itself (``g`` on the parent's
    exterior panels), which is all a single solve needs at the root.
    """

    def __init__(self, layout, dtype, need_ext_rows=True, with_operator=True,
                 sparse_C=False, apply_C_to=None, with_data=True):
        n_ext, n_int = layout.n_ext, layout.n_int
        if layout.variant == "iti":
            dtype = np.result_type(dtype, complex)
        if apply_C_to is not None:
            dtype = np.result_type(dtype, apply_C_to)
        self.layout = layout
        self.dtype = dtype
        self.with_operator = with_operator
        self.sparse_C = sparse_C
        ext_op = need_ext_rows and with_operator
        self.A = np.zeros((n_ext, n_ext), dtype) if ext_op else None
        self.B = np.zeros((n_ext, n_int), dtype) if ext_op else None
        self.g = None if apply_C_to is None else np.asarray(apply_C_to)
        if not with_operator or self.g is not None:
            self.C = None
        elif sparse_C:
            self.C = ScatteredBlocks((n_int, n_ext), dtype)
        else:
            self.C = np.zeros((n_int, n_ext), dtype)
        self.Cg = np.zeros(n_int, dtype) if self.g is not None else None
        self.D = np.zeros((n_int, n_int), dtype) if with_operator else None
        self.h_ext = np.zeros(n_ext, dtype) if with_data and need_ext_rows else None
        self.h_int = np.zeros(n_int, dtype) if with_data else None
        self._added = set()

    def add(self, c, child, release=False):
        lay = self.layout
        if c in self._added:
            raise MergeError(f"child {LETTERS[c]} added twice")
        self._added.add(c)
        src = child if self.with_operator else BoundaryOp(None, child.h, child.faces)
        T, h = _effective(src, lay.expand[c])
        (ie, ge), (ii, gi), (oe, re), (oi, ri) = _split_maps(lay, c)
        if self.with_operator:
            if self.A is not None:
                self.A[np.ix_(re, ge)] += T[np.ix_(oe, ie)]
                self.B[np.ix_(re, gi)] += T[np.ix_(oe, ii)]
            if self.g is not None:
                self.Cg[ri] += T[np.ix_(oi, ie)] @ self.g[ge]
            elif self.sparse_C:
                self.C.add(ri, ge, T[np.ix_(oi, ie)])
            else:
                self.C[np.ix_(ri, ge)] += T[np.ix_(oi, ie)]
            self.D[np.ix_(ri, gi)] += T[np.ix_(oi, ii)]
            if release:
                child.T = None
            del T
        if self.h_int is not None:
            if h is None:
                raise MergeError(f"child {LETTERS[c]} has no outgoing data")
            if self.h_ext is not None:
                self.h_ext[re] += h[oe]
            self.h_int[ri] += h[oi]

    def finish(self):
        if len(self._added) != len(self.layout.in_maps):
            raise MergeError("not every child was added to the merge")
        if self.layout.variant == "iti" and self.D is not None:
            self.D[np.diag_indices(self.layout.n_int)] += 1.0
        blocks = MergeBlocks(A=self.A, B=self.B, C=self.C, D=self.D,
                             h_ext_child=self.h_ext, h_int_child=self.h_int,
                             layout=self.layout, Cg=self.Cg)
        return blocks


def assemble_blocks(children, layout, need_ext_rows=True, with_operator=True,
                    sparse_C=False, release=False):
    """Scatter-add the children's operators into ``A, B, C, D`` and data into ``h``.

    Skipping the exterior rows (``need_ext_rows=False``) avoids forming ``A``
    and ``B`` when the parent operator is not needed.  ``sparse_C`` keeps ``C``
    as per-child blocks (:class:`ScatteredBlocks`); ``release`` drops each
    child's ``T`` once it has been scattered.
    """
    dtype = np.result_type(*[c.T for c in children if c.T is not None],
                           *[c.h for c in children if c.h is not None], float)
    asm = BlockAssembler(layout, dtype, need_ext_rows=need_ext_rows,
                         with_operator=with_operator, sparse_C=sparse_C,
                         with_data=all(c.h is not None for c in children))
    for c, child in enumerate(children):
        asm.add(c, child, release=release)
    return asm.finish()


def _children_ops(children):
    return [c if isinstance(c, BoundaryOp) else BoundaryOp(c.T, c.h, getattr(c, "faces"),
                                                           getattr(c, "node_id", None))
            for c in children]


def assemble_quad_dtn(children, q=None):
    """2D DtN merge blocks for children in (a, b, c, d) order."""
    children = _children_ops(children)
    q = q or _infer_q(children, 2)
    return assemble_blocks(children, merge_layout([c.faces for c in children], q, "dtn"))


def assemble_quad_iti(children, q=None):
    """2D ItI merge blocks; ``D = I + [[0, D12], [D21, 0]]``."""
    children = _children_ops(children)
    q = q or _infer_q(children, 2)
    return assemble_blocks(children, merge_layout([c.faces for c in children], q, "iti"))


def assemble_oct_dtn(children, q=None):
    """3D DtN merge blocks for children in (a, ..., h) order."""
    children = _children_ops(children)
    q = q or _infer_q(children, 3)
    return assemble_blocks(children, merge_layout([c.faces for c in children], q, "dtn"))


def _infer_q(children, dim):
    c = children[0]
    n_pts = c.T.shape[0] if c.T is not None else len(c.h)
    per_panel = n_pts / sum(len(f) for f in c.faces)
    q = round(per_panel ** (1.0 / (dim - 1)))
    if q ** (dim - 1) != per_panel:
        raise MergeError("cannot infer panel order from child sizes")
    return q


# ---------------------------------------------------------------------------
# interface solves
# ---------------------------------------------------------------------------

class DenseSolver:
    """Pivoted LU of ``D``."""

    def __init__(self, D, node_id=None, overwrite=False):
        anorm = np.linalg.norm(D, 1) if D.size else 0.0
        lu, piv, info = lapack.get_lapack_funcs("getrf", (D,))(D, overwrite_a=overwrite)
        if info > 0:
            raise MergeError(f"singular interface matrix at node {node_id}", node_id, np.inf)
        self.fac = (lu, piv)
        self.n = D.shape[0]
        self.nbytes = lu.nbytes + piv.nbytes
        if D.size:
            rcond, _ = lapack.get_lapack_funcs("gecon", (lu,))(lu, anorm, norm="1")
            self.cond = np.inf if rcond == 0 else 1.0 / rcond
        else:
            self.cond = 1.0

    def solve(self, rhs):
        return sla.lu_solve(self.fac, rhs, check_finite=False)

    def solve_T(self, rhs):
        """``D^-T rhs`` (plain transpose)."""
        return sla.lu_solve(self.fac, rhs, trans=1, check_finite=False)


class ItISolver:
    """Solve with ``D = I + [[0, D12], [D21, 0]]`` through ``W = I - D12 D21``."""

    def __init__(self, D, node_id=None, overwrite=False):
        n = D.shape[0]
        if n % 2:
            raise MergeError("impedance interface matrix must have even size", node_id)
        m = n // 2
        self.D12 = np.array(D[:m, m:])
        self.D21 = np.array(D[m:, :m])
        W = np.eye(m, dtype=D.dtype) - self.D12 @ self.D21
        lu, piv, info = lapack.get_lapack_funcs("getrf", (W,))(W)
        if info > 0:
            raise MergeError(f"singular W at node {node_id}", node_id, np.inf)
        self.fac = (lu, piv)
        self.m = m
        self.n = n
        self.nbytes = lu.nbytes + piv.nbytes + self.D12.nbytes + self.D21.nbytes
        rcond, _ = lapack.get_lapack_funcs("gecon", (lu,))(lu, np.linalg.norm(W, 1), norm="1")
        self.cond = np.inf if rcond == 0 else 1.0 / rcond

    def solve(self, rhs):
        m = self.m
        r1, r2 = rhs[:m], rhs[m:]
        x1 = sla.lu_solve(self.fac, r1 - self.D12 @ r2, check_finite=False)
        x2 = r2 - self.D21 @ x1
        return np.concatenate([x1, x2], axis=0)

    def solve_T(self, rhs):
        """``D^-T rhs``: the same elimination with the blocks transposed."""
        m = self.m
        r1, r2 = rhs[:m], rhs[m:]
        x1 = sla.lu_solve(self.fac, r1 - self.D21.T @ r2, trans=1, check_finite=False)
        x2 = r2 - self.D12.T @ x1
        return np.concatenate([x1, x2], axis=0)


def iti_D_inverse(D):
    """Dense inverse of ``I + [[0, D12], [D21, 0]]`` from its block structure.

    ``D^-1 = [[W^-1, -W^-1 D12], [-D21 W^-1, I + D21 W^-1 D12]]`` with
    ``W = I - D12 D21``.
    """
    D = np.asarray(D)
    m = D.shape[0] // 2
    D12, D21 = D[:m, m:], D[m:, :m]
    W = np.eye(m, dtype=D.dtype) - D12 @ D21
    Wi = np.linalg.inv(W)
    top = np.hstack([Wi, -Wi @ D12])
    bot = np.hstack([-D21 @ Wi, np.eye(m, dtype=D.dtype) + D21 @ Wi @ D12])
    return np.vstack([top, bot])


@dataclass
class MergeArtifact:
    """Per-node merge output used by the upward data pass and the downward pass.

    ``S`` may be absent when the node was merged lazily (only the interface
    factor and ``C`` are kept and ``S g`` is applied on demand).
    """

    node_id: int | None
    child_ids: list
    layout: MergeLayout
    solver: object
    T: np.ndarray | None = None
    h: np.ndarray | None = None
    S: np.ndarray | None = None
    gtilde: np.ndarray | None = None
    B: np.ndarray | None = None
    C: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def projection_info(self):
        return [ex is not None for ex in self.layout.expand]

    @property
    def faces(self):
        return self.layout.parent_faces

    def interior_data(self, g):
        """``g_int = S g + g~`` for boundary data ``g`` on the node's boundary."""
        if self.S is not None:
            out = self.S @ g
        elif self.C is not None:
            out = -self.solver.solve(self.C @ g)
        else:
            # single-solve root: the full interior data is stored in gtilde
            out = np.zeros(self.layout.n_int, dtype=np.result_type(g, self.solver_dtype))
        if self.gtilde is not None:
            out = out + self.gtilde
        return out

    def child_data(self, g):
        """Split parent boundary data into each child's (native) boundary data."""
        full = np.concatenate([g, self.interior_data(g)])
        out = []
        for c, imap in enumerate(self.layout.in_maps):
            gc = full[imap]
            ex = self.layout.expand[c]
            out.append(gc if ex is None else ex[0] @ gc)
        return out

    def child_data_T(self, children_gbar):
        """Transpose of :meth:`child_data`: ``(g_bar, gtilde_bar)``."""
        lay = self.layout
        dt = np.result_type(*children_gbar, self.solver_dtype)
        full = np.zeros(lay.n_ext + lay.n_int, dtype=dt)
        for c, (imap, gb) in enumerate(zip(lay.in_maps, children_gbar)):
            ex = lay.expand[c]
            np.add.at(full, imap, gb if ex is None else ex[0].T @ gb)
        gb, ib = full[:lay.n_ext], full[lay.n_ext:]
        if self.S is not None:
            gb = gb + self.S.T @ ib
        elif self.C is not None:
            C = self.C.toarray() if isinstance(self.C, ScatteredBlocks) else self.C
            gb = gb - C.T @ self.solver.solve_T(ib)
        else:
            raise MergeError("single-solve root has no interior map to transpose",
                             self.node_id)
        return gb, ib

    def update_data_T(self, hbar, gtbar):
        """Transpose of :meth:`update_data`: per-child outgoing-data cotangents.

        ``hbar`` is the cotangent of ``h`` (``None`` when ``h`` is unused) and
        ``gtbar`` that of ``gtilde``.
        """
        lay = self.layout
        gt = np.array(gtbar, dtype=np.result_type(gtbar, self.solver_dtype))
        if hbar is not None:
            if self.B is None:
                raise MergeError("outgoing data map was not kept", self.node_id)
            gt = gt + self.B.T @ hbar
        hint = -self.solver.solve_T(gt)
        out = []
        for c in range(len(lay.in_maps)):
            (_, _), (_, _), (oe, re), (oi, ri) = _split_maps(lay, c)
            n_eff = len(lay.out_maps[c])
            hb = np.zeros(n_eff, dtype=hint.dtype)
            if hbar is not None:
                hb[oe] = hbar[re]
            hb[oi] = hint[ri]
            ex = lay.expand[c]
            out.append(hb if ex is None else ex[1].T @ hb)
        return out

    def update_data(self, children_h):
        """Upward data pass for new child outgoing data; sets ``h`` and ``gtilde``."""
        ops = [BoundaryOp(None, h, None) for h in children_h]
        lay = self.layout
        h_int = np.zeros(lay.n_int, dtype=np.result_type(*children_h, self.solver_dtype))
        h_ext = np.zeros(lay.n_ext, dtype=h_int.dtype)
        for c, op in enumerate(ops):
            _, h = _effective(op, lay.expand[c])
            (_, _), (_, _), (oe, re), (oi, ri) = _split_maps(lay, c)
            h_ext[re] += h[oe]
            h_int[ri] += h[oi]
        self.gtilde = -self.solver.solve(h_int)
        if self.B is not None:
            self.h = h_ext + self.B @ self.gtilde
        else:
            self.h = None
        return self.h

    @property
    def solver_dtype(self):
        return complex if self.layout.variant == "iti" else float


def schur_merge(blocks: MergeBlocks, node_id=None, child_ids=None, keep_T=True, lazy=False,
                overwrite_D=False):
    """Eliminate the interface unknowns.

    ``T = A - B D^-1 C``, ``h = h_ext - B D^-1 h_int``, ``S = -D^-1 C`` and
    ``g~ = -D^-1 h_int``.  ``D`` is factored, never inverted (the impedance
    variant uses its block structure).  With ``lazy=True`` ``S`` is not formed;
    the factor and ``C`` are kept instead.  ``overwrite_D`` lets the
    factorization reuse the storage of ``blocks.D``.
    """
    lay = blocks.layout
    D = blocks.D
    if lay.n_int == 0:
        raise MergeError("merge without interior interfaces", node_id)
    solver = (ItISolver if lay.variant == "iti" else DenseSolver)(D, node_id, overwrite_D)
    blocks.D = D = None if overwrite_D else D
    art = MergeArtifact(node_id=node_id, child_ids=list(child_ids or []), layout=lay,
                        solver=solver)
    art.extra["D_size"] = lay.n_int
    art.extra["cond"] = solver.cond
    if lazy:
        art.C = blocks.C
        S = None
    else:
        if isinstance(blocks.C, ScatteredBlocks):
            blocks.C = blocks.C.toarray()
        S = -solver.solve(blocks.C)
        art.S = S
    if keep_T:
        if blocks.A is None:
            raise MergeError("exterior blocks were not assembled", node_id)
        if S is None:
            S = -solver.solve(blocks.C)
        art.T = blocks.A + blocks.B @ S
        art.B = blocks.B
    if blocks.h_int_child is not None:
        art.gtilde = -solver.solve(blocks.h_int_child)
        if keep_T and blocks.h_ext_child is not None:
            art.h = blocks.h_ext_child + blocks.B @ art.gtilde
    return art


def merge_nodes(children, q, variant, node_id=None, keep_T=True, lazy=False,
                with_data=True, release=False):
    """Assemble and eliminate in one step; returns a :class:`MergeArtifact`.

    ``release=True`` clears ``T`` on the given child objects after assembly,
    which bounds peak memory in the bottom-up sweep.
    """
    children = _children_ops(children)
    if not with_data and any(c.h is not None for c in children):
        children = [BoundaryOp(c.T, None, c.faces, c.node_id) for c in children]
    ids = [c.node_id for c in children]
    layout = merge_layout([c.faces for c in children], q, variant)
    blocks = assemble_blocks(children, layout, need_ext_rows=keep_T,
                             sparse_C=lazy and not keep_T, release=release)
    del children
    return schur_merge(blocks, node_id=node_id, child_ids=ids, keep_T=keep_T, lazy=lazy,
                       overwrite_D=True)


def merge_nonuniform_oct(children, q, node_id=None, keep_T=True, lazy=False):
    """8-to-1 merge of children at possibly different refinement depths.

    Interface panels are taken from the coarser side; the finer child's
    operator rows and columns are projected with the 4-to-1 panel maps, and
    the coarse-to-fine maps are kept for the downward pass.
    """
    children = _children_ops(children)
    if len(children) != 8:
        raise ValueError("oct merge needs 8 children")
    return merge_nodes(children, q, "dtn", node_id=node_id, keep_T=keep_T, lazy=lazy)


def merge_level(tree, level, artifacts, q, variant, keep_T=True):
    """Merge every internal node at ``level`` given its children's artifacts.

    ``artifacts`` maps node id to an object with ``T``, ``h`` and ``faces``;
    new artifacts are added to it and also returned in level order.
    """
    out = []
    for node in tree.levels[level]:
        if node.is_leaf:
            continue
        missing = [c for c in node.children if c not in artifacts]
        if missing:
            raise MergeError(f"missing child artifacts {missing} for node {node.node_id}",
                             node.node_id)
        art = merge_nodes([artifacts[c] for c in node.children], q, variant,
                          node_id=node.node_id, keep_T=keep_T)
        artifacts[node.node_id] = art
        out.append(art)
    return out


def interface_sizes(tree):
    """Interface (``D``) size of every internal node, from geometry alone."""
    q, dim = tree.q, tree.dim
    npp = q ** (dim - 1)
    faces = {}
    sizes = {}
    for node in tree.internal_nodes_bottom_up():
        for c in node.children:
            if tree.nodes[c].is_leaf:
                faces[c] = leaf_faces(tree.nodes[c], dim)
        lay_faces = [faces[c] for c in node.children]
        secs = _sections(dim)
        n_int = 0
        for k, (clo, chi, axis) in secs.items():
            com = common_panels(lay_faces[clo][_face_index(dim, axis, 1)],
                                lay_faces[chi][_face_index(dim, axis, 0)])
            n_int += len(com) * npp
        # parent faces are the children's exterior faces (unprojected)
        pf = []
        for axis, side in faces_for_dim(dim):
            f = _face_index(dim, axis, side)
            panels = []
            for c in _face_children(dim, axis, side):
                panels.extend(lay_faces[c][f])
            pf.append(panels)
        faces[node.node_id] = pf
        sizes[node.node_id] = n_int
        for c in node.children:
            faces.pop(c, None)
    return sizes


def node_faces(tree, node):
    """Boundary panels of ``node`` as produced by the merges below it."""
    dim = tree.dim
    if node.is_leaf:
        return leaf_faces(node, dim)
    kids = [node_faces(tree, tree.nodes[c]) for c in node.children]
    out = []
    for axis, side in faces_for_dim(dim):
        f = _face_index(dim, axis, side)
        panels = []
        for c in _face_children(dim, axis, side):
            panels.extend(kids[c][f])
        out.append(panels)
    return out


def top_D_size(tree):
    """Size of the root interface matrix (0 for a single-leaf tree)."""
    if tree.root.is_leaf:
        return 0
    return interface_sizes(tree)[tree.root.node_id]
