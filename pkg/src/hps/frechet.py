"""Derivatives of the scattering forward map and Gauss-Newton inversion.

The potential is a finite sine series ``q = B theta`` on ``[-1, 1]^2``.  The
forward map solves

    Lap u + k^2 (1 + q) u = -k^2 q exp(i k <s, x>)

with the absorbing closure ``u_n - i k u = 0`` and returns smoothed point
values of ``u`` at interior receivers.  Differentiating the discrete system
gives the derivative problem

    Lap w + k^2 (1 + q) w = -k^2 (B v) (u + exp(i k <s, x>))

with the same operator, so ``jvp`` is one extra solve with the cached
factorization.  ``vjp`` applies the exact transpose of the
discrete solve (reverse sweep through the same factors), so the adjoint
identity holds to rounding.  :meth:`ForwardState.vjp_continuous` is the
discretized continuous adjoint: a forward-closure solve with conjugated
receiver sources, accurate only to discretization error.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .mesh import Box, build_uniform_tree, leaf_cheb_points
from .problems import make_scattering, random_bumps
from .solver import HPSSolver
from .spectral import clenshaw_curtis_weights


class GaussNewtonWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# sine basis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SineBasisSpec:
    """``sin(m1 pi (x1 - 1) / 2) sin(m2 pi (x2 - 1) / 2)`` with ``|m| <= gamma``.

    Modes are listed ``m1``-major.  The functions vanish on the boundary of
    ``[-1, 1]^2`` and are orthonormal in ``L^2`` there.
    """

    gamma: float

    @cached_property
    def modes(self):
        g = self.gamma
        top = int(math.floor(g))
        return [(m1, m2) for m1 in range(1, top + 1) for m2 in range(1, top + 1)
                if m1 * m1 + m2 * m2 <= g * g]

    @property
    def N_theta(self):
        return len(self.modes)

    def lowest(self, n):
        """Indices of the ``n`` lowest-frequency modes (ties in listing order)."""
        f = [m1 * m1 + m2 * m2 for m1, m2 in self.modes]
        return sorted(range(len(f)), key=lambda j: (f[j], j))[:n]

    def matrix(self, points):
        """``(n, N_theta)`` basis samples."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        m = np.array(self.modes, dtype=float)
        a = np.sin(np.outer(x[:, 0] - 1.0, m[:, 0]) * (np.pi / 2))
        b = np.sin(np.outer(x[:, 1] - 1.0, m[:, 1]) * (np.pi / 2))
        return a * b


def _check_theta(basis, theta):
    theta = np.asarray(theta)
    if theta.shape != (basis.N_theta,):
        raise ValueError(f"expected {basis.N_theta} coefficients, got shape {theta.shape}")
    return theta


def basis_apply(basis: SineBasisSpec, theta, points):
    """``q_theta`` at ``points``."""
    return basis.matrix(points) @ _check_theta(basis, theta)


def basis_adjoint(basis: SineBasisSpec, samples, weights, points):
    """``B^T (w * samples)``: the adjoint of :func:`basis_apply` under the weights."""
    samples = np.asarray(samples)
    weights = np.asarray(weights, dtype=float)
    if samples.shape[0] != len(points) or weights.shape[0] != len(points):
        raise ValueError("samples, weights and points must have the same length")
    return basis.matrix(points).T @ (weights * samples)


def project_onto_basis(basis, fn, n_quad=160):
    """``L^2`` projection coefficients ``int fn b_j`` by tensor Gauss-Legendre."""
    x, w = np.polynomial.legendre.leggauss(n_quad)
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    W = np.outer(w, w).ravel()
    return basis.matrix(pts).T @ (W * fn(pts))


# ---------------------------------------------------------------------------
# receivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Receivers:
    """Gaussian-smoothed point evaluations, normalized on the discretization."""

    centers: np.ndarray
    sigma: float = 0.05

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if c.shape[1] != 2:
            raise ValueError("receiver centres must be 2D points")
        if np.any(np.abs(c) >= 1.0):
            raise ValueError("receiver centres must lie inside the domain")
        if not self.sigma > 0:
            raise ValueError("receiver width must be positive")
        object.__setattr__(self, "centers", c)

    @classmethod
    def ring(cls, n=100, radius=0.8, sigma=0.05):
        t = 2 * np.pi * np.arange(n) / n
        return cls(np.column_stack([radius * np.sin(t), radius * np.cos(t)]), sigma)

    def __len__(self):
        return len(self.centers)

    def kernel(self, points):
        """Unnormalized mollifier values ``(n_receivers, n_points)``."""
        d2 = ((self.centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2 * self.sigma ** 2))


# ---------------------------------------------------------------------------
# discretization and forward state
# ---------------------------------------------------------------------------

class Discretization:
    """Uniform quadtree grid with leaf quadrature and receiver matrices."""

    def __init__(self, basis, receivers, p, L):
        self.basis, self.receivers = basis, receivers
        self.tree = build_uniform_tree(Box.cube(-1.0, 1.0, 2), L, p=p)
        self.p, self.L = p, L
        self.points = np.vstack([leaf_cheb_points(n, p) for n in self.tree.leaves])
        cc = clenshaw_curtis_weights(p)
        w = np.outer(cc, cc).ravel()
        self.weights = np.concatenate([w * (n.box.side / 2) ** 2 for n in self.tree.leaves])
        self.B = basis.matrix(self.points)
        K = receivers.kernel(self.points)
        K /= (K * self.weights).sum(axis=1, keepdims=True)  # each integrates to 1
        self.phi = K
        self.R = K * self.weights  # receiver functionals on grid values
        self.n_leaves = self.tree.n_leaves

    def per_leaf(self, flat):
        return list(np.asarray(flat).reshape(self.n_leaves, -1))


@dataclass
class InverseProblem:
    basis: SineBasisSpec
    theta_star: np.ndarray
    receivers: Receivers
    k: float
    p: int = 16
    L: int = 3
    shat: tuple = (1.0, 0.0)
    data: np.ndarray | None = None
    disc: Discretization | None = field(default=None, repr=False)

    def __post_init__(self):
        self.theta_star = _check_theta(self.basis, np.asarray(self.theta_star, dtype=float))
        if self.disc is None:
            self.disc = Discretization(self.basis, self.receivers, self.p, self.L)
        if self.data is None:
            self.data = forward_map(self.theta_star, self)


class ForwardState:
    """Factored forward operator at one ``theta`` plus the total field."""

    def __init__(self, theta, ip: InverseProblem):
        theta = _check_theta(ip.basis, np.asarray(theta, dtype=float))
        d = ip.disc
        self.theta, self.ip, self.disc = theta, ip, d
        basis = ip.basis

        def q(x):
            return basis.matrix(x) @ theta

        self.problem = make_scattering(ip.k, potential=q, shat=ip.shat)
        self.solver = HPSSolver(d.tree, self.problem).factor()
        self.incident = self.problem.params["incident"](d.points)
        src = -ip.k ** 2 * (d.B @ theta) * self.incident
        self.u = self._solve(src)
        self.total = self.u + self.incident

    def _solve(self, src_flat):
        return self.solver.solve(sources=self.disc.per_leaf(src_flat)).flat()

    def receive(self, field_flat):
        return self.disc.R @ field_flat

    def jvp(self, v):
        v = np.asarray(v)
        src = -self.ip.k ** 2 * (self.disc.B @ v) * self.total
        return self.receive(self._solve(src))

    def vjp(self, f):
        """Adjoint action ``J^H f`` of the discrete map (complex coefficient vector)."""
        d = self.disc
        y = d.R.T @ np.conj(np.asarray(f, dtype=complex))
        sb = np.concatenate(self.solver.solve_transpose(d.per_leaf(y)))
        return -self.ip.k ** 2 * (d.B.T @ np.conj(sb * self.total))

    def vjp_continuous(self, f):
        """Discretized continuous adjoint (agrees with :meth:`vjp` to discretization error)."""
        d = self.disc
        F = d.phi.T @ np.asarray(f, dtype=complex)
        z = np.conj(self._solve(np.conj(F)))
        return -self.ip.k ** 2 * (d.B.T @ (d.weights * z * np.conj(self.total)))


def forward_map(theta, ip: InverseProblem, state=None):
    """Receiver values of the scattered field for potential ``B theta``."""
    st = state or ForwardState(theta, ip)
    return st.receive(st.u)


def jvp(theta, v, ip: InverseProblem, state=None):
    st = state or ForwardState(theta, ip)
    return st.jvp(_check_theta(ip.basis, v))


def vjp(theta, f, ip: InverseProblem, state=None):
    st = state or ForwardState(theta, ip)
    f = np.asarray(f)
    if f.shape != (len(ip.receivers),):
        raise ValueError(f"expected {len(ip.receivers)} receiver values, got {f.shape}")
    return st.vjp(f)


# ---------------------------------------------------------------------------
# Gauss-Newton
# ---------------------------------------------------------------------------

@dataclass
class GNRecord:
    iteration: int
    residual: float
    theta_err: float
    step_halvings: int = 0
    lsqr_iters: int = 0
    flagged: bool = False


def _real_operator(st, n_theta, n_rec):
    def mv(v):
        y = st.jvp(np.asarray(v, dtype=float).ravel())
        return np.concatenate([y.real, y.imag])

    def rmv(r):
        r = np.asarray(r).ravel()
        return st.vjp(r[:n_rec] + 1j * r[n_rec:]).real

    return LinearOperator((2 * n_rec, n_theta), matvec=mv, rmatvec=rmv, dtype=float)


def gauss_newton(ip: InverseProblem, theta0, max_iters=25, tol=1e-10, lsqr_tol=1e-10,
                 lsqr_iters=200, max_halvings=10):
    """Gauss-Newton with LSQR inner solves and step halving.

    Returns ``(theta, history)`` where ``history`` is a list of
    :class:`GNRecord`, entry 0 being the starting point.  The loop stops
    once ``||data - F(theta)|| < tol ||data||``.
    """
    theta = _check_theta(ip.basis, np.asarray(theta0, dtype=float)).copy()
    dnorm = np.linalg.norm(ip.data)
    st = ForwardState(theta, ip)
    res = ip.data - st.receive(st.u)
    rn = np.linalg.norm(res)
    hist = [GNRecord(0, rn, float(np.abs(theta - ip.theta_star).max()))]
    n_rec = len(ip.receivers)
    for it in range(1, max_iters + 1):
        if rn < tol * dnorm:
            break
        A = _real_operator(st, ip.basis.N_theta, n_rec)
        out = lsqr(A, np.concatenate([res.real, res.imag]), atol=lsqr_tol, btol=lsqr_tol,
                   iter_lim=lsqr_iters)
        delta, istop, n_it = out[0], out[1], out[2]
        flagged = istop not in (1, 2, 4, 5)
        if flagged:
            warnings.warn(f"least-squares solve did not converge at iteration {it} "
                          f"(istop={istop})", GaussNewtonWarning, stacklevel=2)
        step, halvings = 1.0, 0
        while True:
            cand = theta + step * delta
            st_c = ForwardState(cand, ip)
            res_c = ip.data - st_c.receive(st_c.u)
            rn_c = np.linalg.norm(res_c)
            if rn_c <= rn or halvings >= max_halvings:
                break
            step *= 0.5
            halvings += 1
        if rn_c > rn:
            # no decrease along this direction: keep the iterate
            flagged = True
            hist.append(GNRecord(it, rn, hist[-1].theta_err, halvings, n_it, flagged))
            break
        theta, st, res, rn = cand, st_c, res_c, rn_c
        hist.append(GNRecord(it, rn, float(np.abs(theta - ip.theta_star).max()),
                             halvings, n_it, flagged))
    return theta, hist


def history_csv(history, header=None):
    buf = io.StringIO()
    if header:
        for line in header.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf)
    w.writerow(["iter", "residual", "theta_err_inf", "step_halvings", "lsqr_iters"])
    for r in history:
        w.writerow([r.iteration, f"{r.residual:.6e}", f"{r.theta_err:.6e}", r.step_halvings,
                    r.lsqr_iters])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# setup helpers
# ---------------------------------------------------------------------------

def make_inverse_problem(gamma=5.0, k=20.0, p=16, L=3, n_receivers=100, radius=0.8,
                         sigma=0.05, seed=0, shat=(1.0, 0.0)):
    """Ground truth = projection of the random-bump potential onto the basis."""
    basis = SineBasisSpec(float(gamma))
    q = random_bumps(seed=seed)
    theta_star = project_onto_basis(basis, q)
    rec = Receivers.ring(n_receivers, radius, sigma)
    return InverseProblem(basis=basis, theta_star=theta_star, receivers=rec, k=float(k),
                          p=int(p), L=int(L), shat=tuple(shat))


def warm_start(ip: InverseProblem, n_exact=3):
    """Lowest ``n_exact`` frequencies set to the truth, the rest zero."""
    theta0 = np.zeros(ip.basis.N_theta)
    idx = ip.basis.lowest(n_exact)
    theta0[idx] = ip.theta_star[idx]
    return theta0
