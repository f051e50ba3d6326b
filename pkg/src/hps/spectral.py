"""One-dimensional rules and the precomputed leaf operators.

Every leaf carries a tensor grid of Chebyshev--Lobatto points and a set of
Gauss--Legendre panels on its boundary.  The matrices built here translate
between the two and are computed once on the reference leaf ``[-1, 1]^d``;
:meth:`LeafOperatorSet.at_side_length` rescales the derivative parts for a
physical leaf.

Grid conventions
----------------
* 1D Chebyshev nodes are descending from +1.
* 2D grid point ``(i, j)`` has flat index ``i * p + j`` and coordinates
  ``(xi[i], xi[j])``; 3D point ``(i, j, k)`` has index ``i * p**2 + j * p + k``.
* 2D sides are ordered (south, east, north, west); 3D faces are ordered
  (-x1, +x1, -x2, +x2, -x3, +x3).  Gauss points on a side/face are ordered by
  increasing face-local coordinates, the second local coordinate fastest.
* The 2D boundary Chebyshev points ``I_e`` run counter-clockwise starting at
  the south-west corner; each side owns its first corner.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

# (axis, side) of each face; side 0 is the low end of the axis.
FACES_2D = ((1, 0), (0, 1), (1, 1), (0, 0))
FACES_3D = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1))


def faces_for_dim(dim):
    return FACES_2D if dim == 2 else FACES_3D


def face_local_axes(axis, dim):
    return tuple(a for a in range(dim) if a != axis)


# ---------------------------------------------------------------------------
# 1D rules
# ---------------------------------------------------------------------------

def cheb_lobatto_1d(p):
    """Chebyshev--Lobatto nodes ``cos(pi k / (p-1))``, descending from +1."""
    if p < 2:
        raise ValueError(f"need p >= 2 Chebyshev points, got {p}")
    x = np.cos(np.pi * np.arange(p) / (p - 1))
    # exact symmetry; cos(pi/2) is not exactly 0 in floating point
    x = 0.5 * (x - x[::-1])
    return x


def gauss_legendre_1d(q):
    """Order-``q`` Gauss--Legendre nodes (ascending) and weights on [-1, 1]."""
    if q < 1:
        raise ValueError(f"need q >= 1 Gauss points, got {q}")
    x, w = np.polynomial.legendre.leggauss(q)
    return x, w


def cheb_diff_matrix(p):
    """Spectral differentiation matrix on :func:`cheb_lobatto_1d` nodes.

    Follows the classical construction with the diagonal fixed by the
    negative-sum trick so that constants are annihilated to rounding error.
    """
    x = cheb_lobatto_1d(p)
    c = np.ones(p)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(p)
    dx = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dx + np.eye(p))
    D -= np.diag(D.sum(axis=1))
    return D


def _bary_weights(src):
    diff = src[:, None] - src[None, :]
    np.fill_diagonal(diff, 1.0)
    if np.any(diff == 0.0):
        raise ValueError("barycentric interpolation needs distinct source nodes")
    # scale to avoid overflow for larger node counts
    diff *= 2.0 / (src.max() - src.min() if src.size > 1 else 1.0)
    return 1.0 / diff.prod(axis=1)


def barycentric_interp_matrix(src, dst):
    """Matrix ``M`` with ``M @ f(src) = p(dst)``, ``p`` the interpolant of ``f``.

    Uses the second (true) barycentric formula; destination points that
    coincide with a source node get the corresponding unit row.
    """
    src = np.asarray(src, dtype=float).ravel()
    dst = np.asarray(dst, dtype=float).ravel()
    w = _bary_weights(src)
    diff = dst[:, None] - src[None, :]
    exact = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        M = w[None, :] / diff
        M /= M.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if hit.any():
        M[hit] = exact[hit].astype(float)
    return M


def clenshaw_curtis_weights(p):
    """Quadrature weights on :func:`cheb_lobatto_1d` nodes (descending)."""
    x = cheb_lobatto_1d(p)
    # integrate the Lagrange basis exactly through a Legendre rule
    xg, wg = gauss_legendre_1d(p)
    return barycentric_interp_matrix(x, xg).T @ wg


# ---------------------------------------------------------------------------
# Leaf grids
# ---------------------------------------------------------------------------

def reference_grid(p, dim):
    """Reference Chebyshev tensor grid on ``[-1, 1]^dim``, shape ``(p**dim, dim)``."""
    x = cheb_lobatto_1d(p)
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def reference_diff_ops(p, dim):
    """Tensorised first-derivative matrices ``[D_1, ..., D_dim]`` on the reference grid."""
    D = cheb_diff_matrix(p)
    eye = np.eye(p)
    ops = []
    for axis in range(dim):
        factors = [eye] * dim
        factors[axis] = D
        M = factors[0]
        for f in factors[1:]:
            M = np.kron(M, f)
        ops.append(M)
    return ops


def _face_point_indices(p, dim, face):
    """Flat grid indices of the Chebyshev points on a face, face-lexicographic."""
    axis, side = faces_for_dim(dim)[face]
    fixed = p - 1 if side == 0 else 0  # nodes descend, so index p-1 is the low end
    idx = np.arange(p ** dim).reshape((p,) * dim)
    sl = [slice(None)] * dim
    sl[axis] = fixed
    sub = idx[tuple(sl)]
    # reorder each remaining axis to ascending coordinate
    sub = sub[(slice(None, None, -1),) * (dim - 1)]
    return sub.ravel()


def _ccw_boundary_2d(p):
    """Counter-clockwise boundary indices with owning side for each point."""
    idx = np.arange(p * p).reshape(p, p)
    south = idx[p - 1:0:-1, p - 1]     # x1 increasing, skip the SE corner
    east = idx[0, p - 1:0:-1]          # x2 increasing, skip NE
    north = idx[0:p - 1, 0]            # x1 decreasing, skip NW
    west = idx[p - 1, 0:p - 1]         # x2 decreasing, skip SW
    order = np.concatenate([south, east, north, west])
    owner = np.repeat(np.arange(4), p - 1)
    return order, owner


@dataclass(frozen=True)
class IndexSets:
    interior: np.ndarray
    exterior: np.ndarray

    @property
    def n_int(self):
        return self.interior.size

    @property
    def n_ext(self):
        return self.exterior.size


@lru_cache(maxsize=None)
def index_sets(p, dim):
    if dim == 2:
        exterior, _ = _ccw_boundary_2d(p)
    else:
        grid = np.arange(p ** dim).reshape((p,) * dim)
        mask = np.zeros((p,) * dim, dtype=bool)
        for axis in range(dim):
            sl = [slice(None)] * dim
            sl[axis] = 0
            mask[tuple(sl)] = True
            sl[axis] = p - 1
            mask[tuple(sl)] = True
        exterior = grid[mask]
    is_ext = np.zeros(p ** dim, dtype=bool)
    is_ext[exterior] = True
    interior = np.flatnonzero(~is_ext)
    for a in (interior, exterior):
        a.setflags(write=False)
    return IndexSets(interior=interior, exterior=exterior)


# ---------------------------------------------------------------------------
# Leaf operator sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeafOperatorSet:
    """Precomputed maps between the Chebyshev grid and the Gauss panels.

    Matrices refer to the reference leaf ``[-1, 1]^d`` unless ``side_length``
    says otherwise.  ``N``, ``Ntilde``, ``H``, ``G`` are only populated for the
    impedance (ItI) variant; for DtN ``Q`` maps grid values straight to normal
    derivatives on the Gauss points.
    """

    p: int
    q: int
    dim: int
    variant: str
    P: np.ndarray
    Q: np.ndarray
    idx: IndexSets
    N: np.ndarray | None = None
    Ntilde: np.ndarray | None = None
    H: np.ndarray | None = None
    G: np.ndarray | None = None
    eta: float | None = None
    side_length: float = 2.0
    # sampling parts of H and G, kept so the operators can be rescaled
    _E4p: np.ndarray | None = field(default=None, repr=False)
    _Ee: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_bdry(self):
        return self.Q.shape[0]

    def at_side_length(self, h):
        """Operators for a leaf of side ``h`` (derivative rows scale by ``2/h``)."""
        if h == self.side_length:
            return self
        return _rescaled(self, float(h))


_scale_lock = threading.Lock()
_scale_cache: dict = {}


def _rescaled(ops, h):
    key = (id(ops), h)
    with _scale_lock:
        hit = _scale_cache.get(key)
        if hit is not None and hit[0] is ops:
            return hit[1]
    s = ops.side_length / h
    if ops.variant == "dtn":
        new = replace(ops, Q=_frozen(ops.Q * s), side_length=h)
    else:
        N = ops.N * s
        Nt = ops.Ntilde * s
        H = N - 1j * ops.eta * ops._E4p
        G = Nt + 1j * ops.eta * ops._Ee
        new = replace(ops, N=_frozen(N), Ntilde=_frozen(Nt), H=_frozen(H),
                      G=_frozen(G), side_length=h)
    with _scale_lock:
        _scale_cache[key] = (ops, new)
    return new


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _normal_rows(p, dim, face):
    """Outward normal-derivative rows (reference leaf) at the face's grid points."""
    axis, side = faces_for_dim(dim)[face]
    D = reference_diff_ops(p, dim)[axis]
    rows = _face_point_indices(p, dim, face)
    sign = 1.0 if side == 1 else -1.0
    return sign * D[rows]


def _cheb_to_gauss(p, q):
    xc = cheb_lobatto_1d(p)[::-1]
    xg, _ = gauss_legendre_1d(q)
    return barycentric_interp_matrix(xc, xg)


def _gauss_rows_at(q, t):
    """Rows interpolating a q-point Gauss panel to face coordinates ``t``."""
    xg, _ = gauss_legendre_1d(q)
    return barycentric_interp_matrix(xg, np.atleast_1d(t))


def _check_pq(p, q):
    if p < 3:
        raise ValueError(f"p must be >= 3 so the leaf has interior points, got {p}")
    if q != p - 2:
        raise ValueError(f"q must equal p - 2 (p={p}, q={q})")


@lru_cache(maxsize=None)
def assemble_dtn_ops_2d(p, q):
    """``P`` (corner rows averaged) and ``Q`` for the 2D DtN local solve."""
    _check_pq(p, q)
    idx = index_sets(p, 2)
    coords = reference_grid(p, 2)
    P = np.zeros((idx.n_ext, 4 * q))
    for r, g in enumerate(idx.exterior):
        x = coords[g]
        hits = []
        for face, (axis, side) in enumerate(FACES_2D):
            if x[axis] == (1.0 if side else -1.0):
                t = x[1 - axis]
                hits.append((face, _gauss_rows_at(q, t)[0]))
        for face, row in hits:
            P[r, face * q:(face + 1) * q] += row / len(hits)
    M = _cheb_to_gauss(p, q)
    Q = np.vstack([M @ _normal_rows(p, 2, f) for f in range(4)])
    return LeafOperatorSet(p=p, q=q, dim=2, variant="dtn", P=_frozen(P),
                           Q=_frozen(Q), idx=idx)


@lru_cache(maxsize=None)
def assemble_iti_ops_2d(p, q, eta):
    """Impedance-variant operators ``P, Q, N, Ntilde, H, G``.

    ``P`` deletes the last row of each per-side Gauss-to-Chebyshev block so
    that side ``s`` supplies its ``p - 1`` counter-clockwise points; corners
    belong to the side that starts at them, and ``Ntilde``/``G`` use that
    side's outward normal.
    """
    _check_pq(p, q)
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    idx = index_sets(p, 2)
    order, owner = _ccw_boundary_2d(p)
    coords = reference_grid(p, 2)
    n_e = 4 * p - 4
    P = np.zeros((n_e, 4 * q))
    Nt = np.zeros((n_e, p * p))
    Ee = np.zeros((n_e, p * p))
    normals = [_normal_rows(p, 2, f) for f in range(4)]
    face_pts = [_face_point_indices(p, 2, f) for f in range(4)]
    for r, (g, face) in enumerate(zip(order, owner)):
        axis, _ = FACES_2D[face]
        t = coords[g][1 - axis]
        P[r, face * q:(face + 1) * q] = _gauss_rows_at(q, t)[0]
        k = int(np.flatnonzero(face_pts[face] == g)[0])
        Nt[r] = normals[face][k]
        Ee[r, g] = 1.0
    N = np.vstack(normals)
    E4p = np.zeros((4 * p, p * p))
    E4p[np.arange(4 * p), np.concatenate(face_pts)] = 1.0
    M = _cheb_to_gauss(p, q)
    Q = np.kron(np.eye(4), M)
    H = N - 1j * eta * E4p
    G = Nt + 1j * eta * Ee
    return LeafOperatorSet(p=p, q=q, dim=2, variant="iti", P=_frozen(P),
                           Q=_frozen(Q), idx=idx, N=_frozen(N),
                           Ntilde=_frozen(Nt), H=_frozen(H), G=_frozen(G),
                           eta=float(eta), _E4p=_frozen(E4p), _Ee=_frozen(Ee))


@lru_cache(maxsize=None)
def assemble_dtn_ops_3d(p, q):
    """3D DtN ``P`` (edge rows average 2 faces, corners 3) and ``Q``."""
    _check_pq(p, q)
    idx = index_sets(p, 3)
    coords = reference_grid(p, 3)
    P = np.zeros((idx.n_ext, 6 * q * q))
    for r, g in enumerate(idx.exterior):
        x = coords[g]
        hits = []
        for face, (axis, side) in enumerate(FACES_3D):
            if x[axis] == (1.0 if side else -1.0):
                la, lb = face_local_axes(axis, 3)
                ra = _gauss_rows_at(q, x[la])[0]
                rb = _gauss_rows_at(q, x[lb])[0]
                hits.append((face, np.kron(ra, rb)))
        nq = q * q
        for face, row in hits:
            P[r, face * nq:(face + 1) * nq] += row / len(hits)
    M = _cheb_to_gauss(p, q)
    M2 = np.kron(M, M)
    Q = np.vstack([M2 @ _normal_rows(p, 3, f) for f in range(6)])
    return LeafOperatorSet(p=p, q=q, dim=3, variant="dtn", P=_frozen(P),
                           Q=_frozen(Q), idx=idx)


def leaf_operators(p, dim, variant="dtn", eta=None):
    """Cached operator set for ``(p, q=p-2, dim, variant, eta)``."""
    q = p - 2
    if variant == "dtn":
        return assemble_dtn_ops_2d(p, q) if dim == 2 else assemble_dtn_ops_3d(p, q)
    if variant == "iti":
        if dim != 2:
            raise ValueError("the impedance (ItI) variant is two-dimensional only")
        return assemble_iti_ops_2d(p, q, 1.0 if eta is None else float(eta))
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Refinement and panel projection
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def refinement_interp_1d(p):
    """Parent nodes -> nodes of the (low, high) halves, shape ``(2p, p)``."""
    x = cheb_lobatto_1d(p)
    lo = 0.5 * (x - 1.0)
    hi = 0.5 * (x + 1.0)
    return _frozen(np.vstack([barycentric_interp_matrix(x, lo),
                              barycentric_interp_matrix(x, hi)]))


def child_offsets(dim):
    """Bit pattern (per axis, 0 = low half) of children in (a, b, c, d[, e..h]) order."""
    base = ((0, 0), (1, 0), (1, 1), (0, 1))
    if dim == 2:
        return base
    return tuple(b + (0,) for b in base) + tuple(b + (1,) for b in base)


def refinement_interpolant(p, dim=3):
    """Dense ``L_8f1``: parent grid samples to all children's grid samples.

    Rows are grouped by child in :func:`child_offsets` order, each child in
    its own grid order.  Prefer :func:`apply_refinement_interpolant` for
    large ``p`` since this matrix has ``2^d p^{2d}`` entries.
    """
    M = refinement_interp_1d(p)
    blocks = []
    for bits in child_offsets(dim):
        K = M[bits[0] * p:(bits[0] + 1) * p]
        for b in bits[1:]:
            K = np.kron(K, M[b * p:(b + 1) * p])
        blocks.append(K)
    return np.vstack(blocks)


def apply_refinement_interpolant(values, p, dim=3):
    """Tensorised application of :func:`refinement_interpolant`.

    ``values`` has shape ``(..., p**dim)``; the result has shape
    ``(..., 2**dim * p**dim)``.
    """
    M = refinement_interp_1d(p)
    halves = (M[:p], M[p:])
    lead = values.shape[:-1]
    v = values.reshape(lead + (p,) * dim)
    out = []
    for bits in child_offsets(dim):
        w = v
        for axis, b in enumerate(bits):
            w = np.moveaxis(np.tensordot(halves[b], w, axes=([1], [len(lead) + axis])),
                            0, len(lead) + axis)
        out.append(w.reshape(lead + (p ** dim,)))
    return np.concatenate(out, axis=-1)


@lru_cache(maxsize=None)
def face_projection_ops(q, dim=3):
    """Maps between one coarse Gauss panel and its 2^(d-1) fine sub-panels.

    Returns ``(coarse_to_fine, fine_to_coarse)``.  Fine panels follow the
    quadrant order used for composite faces (second local coordinate
    fastest).  ``fine_to_coarse`` evaluates, at each coarse node, the
    interpolant of the fine panel containing it (averaging when a node sits
    on a panel seam).
    """
    xg, _ = gauss_legendre_1d(q)
    lo = 0.5 * (xg - 1.0)
    hi = 0.5 * (xg + 1.0)
    up = (barycentric_interp_matrix(xg, lo), barycentric_interp_matrix(xg, hi))
    # fine panel -> coarse nodes: map coarse nodes into fine-panel coordinates
    down = []
    for half in (0, 1):
        t = 2.0 * xg + (1.0 if half == 0 else -1.0)
        inside = (xg <= 0.0) if half == 0 else (xg >= 0.0)
        R = np.zeros((q, q))
        R[inside] = barycentric_interp_matrix(xg, t[inside])
        down.append(R)
    share = np.where(xg == 0.0, 0.5, 1.0)
    down = [share[:, None] * R for R in down]

    if dim == 2:
        c2f = np.vstack(up)
        f2c = np.hstack(down)
    else:
        quads = [(0, 0), (0, 1), (1, 0), (1, 1)]
        c2f = np.vstack([np.kron(up[a], up[b]) for a, b in quads])
        f2c = np.hstack([np.kron(down[a], down[b]) for a, b in quads])
    return _frozen(c2f), _frozen(f2c)
