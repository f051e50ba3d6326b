"""Leaf-level discretization and local solves (DtN and ItI variants)."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .mesh import leaf_cheb_points
from .spectral import cheb_diff_matrix

COND_WARN = 1e12


class LocalSolveError(RuntimeError):
    """A leaf system could not be factored."""

    def __init__(self, msg, leaf_id=None, cond=None):
        super().__init__(msg)
        self.leaf_id = leaf_id
        self.cond = cond


class IllConditionedWarning(UserWarning):
    pass


ROLES = ("laplacian", "second", "first", "zeroth")


@dataclass(frozen=True)
class CoefficientField:
    """One term ``c(x) * D`` of a second-order operator.

    ``role`` is one of ``laplacian`` (``c * Laplacian``), ``second``
    (``c * d^2/dx_i dx_j`` with ``axes=(i, j)``), ``first`` (``c * d/dx_i`` with
    ``axes=(i,)``) or ``zeroth`` (``c * u``).  ``evaluator`` maps an ``(n, d)``
    point array to values, or is a plain number.
    """

    role: str
    evaluator: Callable | complex | float
    axes: tuple = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown coefficient role {self.role!r}")
        need = {"laplacian": 0, "second": 2, "first": 1, "zeroth": 0}[self.role]
        if len(self.axes) != need:
            raise ValueError(f"role {self.role!r} needs {need} axes, got {self.axes}")

    def sample(self, pts):
        if callable(self.evaluator):
            v = np.asarray(self.evaluator(pts))
        else:
            v = np.asarray(self.evaluator)
        return np.broadcast_to(v, pts.shape[:1])


@dataclass
class LeafSolution:
    """Per-leaf local solve output; arrays are in leaf grid order.

    ``Lmat`` and ``fvec`` are only kept when requested, since they dominate
    memory for 3D leaves.
    """

    Y: np.ndarray
    v: np.ndarray
    T: np.ndarray
    h: np.ndarray
    Lmat: np.ndarray | None = None
    fvec: np.ndarray | None = None
    leaf_id: int | None = None


@lru_cache(maxsize=None)
def _ref_derivs(p, dim):
    """Reference first and second derivative matrices keyed by axes tuple."""
    D = cheb_diff_matrix(p)
    eye = np.eye(p)

    def kron_axes(mats):
        M = mats[0]
        for m in mats[1:]:
            M = np.kron(M, m)
        M.setflags(write=False)
        return M

    out = {}
    for i in range(dim):
        f = [eye] * dim
        f[i] = D
        out[(i,)] = kron_axes(f)
        f = [eye] * dim
        f[i] = D @ D
        out[(i, i)] = kron_axes(f)
        for j in range(i + 1, dim):
            f = [eye] * dim
            f[i] = D
            f[j] = D
            out[(i, j)] = out[(j, i)] = kron_axes(f)
    return out


def discretize_operator(leaf, coeffs: Sequence[CoefficientField], p: int):
    """Collocation matrix of the operator on the leaf's Chebyshev grid."""
    pts = leaf_cheb_points(leaf, p)
    dim = pts.shape[1]
    ref = _ref_derivs(p, dim)
    s = 2.0 / leaf.box.side
    n = p ** dim
    samples = []
    for c in coeffs:
        vals = c.sample(pts)
        bad = ~np.isfinite(vals)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValueError(f"non-finite {c.role} coefficient on leaf {leaf.node_id} "
                             f"at point {pts[k].tolist()}")
        samples.append(vals)
    dtype = np.result_type(float, *samples) if samples else float
    L = np.zeros((n, n), dtype=dtype)
    for c, vals in zip(coeffs, samples):
        if c.role == "laplacian":
            M = sum(ref[(i, i)] for i in range(dim)) * s * s
        elif c.role == "second":
            M = ref[tuple(c.axes)] * s * s
        elif c.role == "first":
            M = ref[tuple(c.axes)] * s
        else:
            L[np.diag_indices(n)] += vals
            continue
        L += vals[:, None] * M
    return L


def _factor(M, leaf_id):
    """Pivoted LU with a 1-norm condition estimate."""
    try:
        lu, piv, info = lapack.get_lapack_funcs("getrf", (M,))(M)
    except ValueError as exc:
        raise LocalSolveError(str(exc), leaf_id) from exc
    if info > 0:
        raise LocalSolveError(f"singular leaf system on leaf {leaf_id}", leaf_id, np.inf)
    anorm = np.linalg.norm(M, 1)
    gecon = lapack.get_lapack_funcs("gecon", (lu,))
    rcond, _ = gecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if cond > COND_WARN:
        warnings.warn(f"leaf {leaf_id}: condition estimate {cond:.2e}",
                      IllConditionedWarning, stacklevel=3)
    return (lu, piv), cond


def _lu_solve(fac, rhs):
    return sla.lu_solve(fac, rhs, check_finite=False)


@dataclass
class LeafOperator:
    """Source-independent part of a leaf solve: factor, ``Y`` and ``T``.

    :meth:`particular` produces ``(v, h)`` for any source vector, so repeated
    solves with the same operator reuse the factorization.
    """

    variant: str
    fac: tuple
    Y: np.ndarray
    T: np.ndarray
    ops: object
    cond: float
    leaf_id: int | None = None

    def particular(self, fvec):
        ii = self.ops.idx.interior
        fi = fvec[ii]
        if not np.all(np.isfinite(fi)):
            raise LocalSolveError(f"non-finite source on leaf {self.leaf_id}", self.leaf_id)
        n = self.Y.shape[0]
        if self.variant == "dtn":
            v = np.zeros(n, dtype=np.result_type(self.Y, fi))
            v[ii] = _lu_solve(self.fac, fi)
            h = self.ops.Q @ v
        else:
            rhs = np.zeros(n, dtype=complex)
            rhs[self.ops.G.shape[0]:] = fi
            v = _lu_solve(self.fac, rhs)
            h = self._QH @ v
        return v, h

    def particular_T(self, vbar, hbar=None):
        """Transpose of ``f -> (v, h)`` of :meth:`particular` (zero off the interior)."""
        ii = self.ops.idx.interior
        vb = np.array(vbar, dtype=np.result_type(vbar, self.Y))
        n = self.Y.shape[0]
        if self.variant == "dtn":
            if hbar is not None:
                vb = vb + self.ops.Q.T @ hbar
            fb = np.zeros(n, dtype=vb.dtype)
            fb[ii] = sla.lu_solve(self.fac, vb[ii], trans=1, check_finite=False)
        else:
            if hbar is not None:
                vb = vb + self._QH.T @ hbar
            r = sla.lu_solve(self.fac, vb, trans=1, check_finite=False)
            fb = np.zeros(n, dtype=r.dtype)
            fb[ii] = r[self.ops.G.shape[0]:]
        return fb

    @property
    def _QH(self):
        return self.ops.Q @ self.ops.H


def factor_leaf_dtn(Lmat, ops, leaf_id=None):
    """Factor ``L(I_i, I_i)`` and form ``Y`` (Dirichlet data on the panels to grid) and ``T``."""
    ii, ie = ops.idx.interior, ops.idx.exterior
    fac, cond = _factor(Lmat[np.ix_(ii, ii)], leaf_id)
    n, nb = Lmat.shape[0], ops.P.shape[1]
    Y = np.zeros((n, nb), dtype=Lmat.dtype)
    Y[ie] = ops.P
    Y[ii] = -_lu_solve(fac, Lmat[np.ix_(ii, ie)] @ ops.P)
    T = ops.Q @ Y
    return LeafOperator("dtn", fac, Y, T, ops, cond, leaf_id)


def factor_leaf_iti(Lmat, ops, leaf_id=None):
    """Factor the bordered matrix ``[G; L(I_i, :)]`` and form ``Y`` and ``T``.

    Unknowns and rows are ordered boundary first, so the first ``4p - 4``
    columns of the inverse act on incoming impedance data.
    """
    ii = ops.idx.interior
    B = np.vstack([ops.G, Lmat[ii]]).astype(complex)
    fac, cond = _factor(B, leaf_id)
    ne, nb = ops.G.shape[0], ops.P.shape[1]
    rhs = np.zeros((B.shape[0], nb), dtype=complex)
    rhs[:ne] = ops.P
    Y = _lu_solve(fac, rhs)
    T = (ops.Q @ ops.H) @ Y
    return LeafOperator("iti", fac, Y, T, ops, cond, leaf_id)


def _local_solve(factor, Lmat, fvec, ops, idx, leaf_id, keep_operator):
    if idx is not None and idx is not ops.idx:
        raise ValueError("index sets must match the operator set")
    op = factor(Lmat, ops, leaf_id)
    v, h = op.particular(np.asarray(fvec))
    return LeafSolution(Y=op.Y, v=v, T=op.T, h=h, leaf_id=leaf_id,
                        Lmat=Lmat if keep_operator else None,
                        fvec=fvec if keep_operator else None)


def local_solve_dtn(Lmat, fvec, ops, idx=None, leaf_id=None, keep_operator=False):
    """Dirichlet-to-Neumann leaf solve.

    ``ops`` must already be scaled to the leaf (see
    :meth:`LeafOperatorSet.at_side_length`).  ``Y`` maps Dirichlet data on the
    Gauss panels to the solution on the full Chebyshev grid; ``v`` is the
    particular solution with zero boundary values, so ``L (Y g + v) = f`` holds
    on the interior collocation rows.
    """
    return _local_solve(factor_leaf_dtn, Lmat, fvec, ops, idx, leaf_id, keep_operator)


def local_solve_iti(Lmat, fvec, ops, idx=None, leaf_id=None, keep_operator=False):
    """Impedance-to-impedance leaf solve.

    ``Y`` maps incoming impedance data on the Gauss panels to the grid
    solution and ``T`` returns outgoing impedance data on the panels.
    """
    return _local_solve(factor_leaf_iti, Lmat, fvec, ops, idx, leaf_id, keep_operator)


def leaf_system(leaf, problem, p):
    """``(L, f)`` for one leaf: operator matrix and source samples."""
    L = discretize_operator(leaf, problem.coeffs, p)
    pts = leaf_cheb_points(leaf, p)
    with np.errstate(all="ignore"):
        f = problem.source_at(pts)
    return L, f


def local_solve_leaf(leaf, problem, ops, keep_operator=False):
    """Discretize and solve one leaf with the problem's variant."""
    L, f = leaf_system(leaf, problem, ops.p)
    lops = ops.at_side_length(leaf.box.side)
    solve = local_solve_dtn if ops.variant == "dtn" else local_solve_iti
    return solve(L, f, lops, leaf_id=leaf.node_id, keep_operator=keep_operator)


def factor_leaf(leaf, problem, ops, Lmat=None):
    """Operator-only leaf factorization (see :class:`LeafOperator`)."""
    if Lmat is None:
        Lmat = discretize_operator(leaf, problem.coeffs, ops.p)
    lops = ops.at_side_length(leaf.box.side)
    factor = factor_leaf_dtn if ops.variant == "dtn" else factor_leaf_iti
    return factor(Lmat, lops, leaf.node_id)


def local_solve_batch(leaves, problem, ops, keep_operator=False):
    """Local solves for a batch of leaves, in input order.

    Each entry is computed by exactly the same code path as a single-leaf
    call, so batched and one-at-a-time results agree bit for bit.  Failures
    are collected and re-raised together with the offending leaf ids.
    """
    out, errors = [], []
    for leaf in leaves:
        try:
            out.append(local_solve_leaf(leaf, problem, ops, keep_operator))
        except (LocalSolveError, ValueError) as exc:
            errors.append((leaf.node_id, str(exc)))
            out.append(None)
    if errors:
        ids = ", ".join(str(i) for i, _ in errors)
        raise LocalSolveError(f"local solve failed on leaves [{ids}]: {errors[0][1]}",
                              leaf_id=errors[0][0])
    return out
