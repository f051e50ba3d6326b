"""Benchmark problems: operators, sources, boundary data and exact solutions.

Every evaluator takes an ``(n, d)`` array of points.  Boundary data for
impedance problems also receives the outward unit normals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .local_solve import CoefficientField
from .mesh import Box


@dataclass(frozen=True)
class ProblemSpec:
    """An elliptic boundary value problem on a square or cube.

    ``bc`` is ``dirichlet`` (``g`` gives values), ``impedance`` (``g`` gives
    incoming data ``u_n + i eta u``) or ``absorbing`` (outgoing data
    ``u_n - i eta u`` vanishes; no ``g`` needed).  ``iti_eta`` is the
    impedance parameter of the ItI leaf and merge operators; it defaults to
    ``eta`` and, when different, the root converts the boundary data.
    """

    name: str
    domain: Box
    coeffs: tuple
    source: Callable
    bc: str = "dirichlet"
    g: Callable | None = None
    exact: Callable | None = None
    exact_grad: Callable | None = None
    variant: str = "dtn"
    eta: float | None = None
    k: float | None = None
    refine_fields: tuple = ()
    params: dict = field(default_factory=dict)
    iti_eta: float | None = None

    def __post_init__(self):
        if self.bc not in ("dirichlet", "impedance", "absorbing"):
            raise ValueError(f"unknown boundary condition {self.bc!r}")
        if self.bc in ("impedance", "absorbing") and self.variant != "iti":
            raise ValueError("impedance boundary conditions need the ItI variant")
        if self.variant == "iti" and not (self.eta and self.eta > 0):
            raise ValueError("ItI variant needs eta > 0")
        if self.iti_eta is not None and not self.iti_eta > 0:
            raise ValueError("iti_eta must be positive")

    @property
    def operator_eta(self):
        """Impedance parameter used by the ItI operators."""
        return self.eta if self.iti_eta is None else float(self.iti_eta)

    @property
    def closes_at_root(self):
        """Whether the root data depends on the root operator and outgoing data."""
        return self.bc == "absorbing" or (self.bc == "impedance"
                                          and self.operator_eta != self.eta)

    def root_closure(self, T, h, pts, normals):
        """Incoming root data ``g = M^{-1} (b + c h)``; returns ``(g, M, c)``.

        Absorbing: ``T g + h = 0``.  Impedance data ``u_n + i eta u`` given
        with a different operator parameter ``eta'``: with ``r = eta / eta'``,
        ``((1 + r) I + (1 - r) T) g = 2 g_data - (1 - r) h``.
        """
        if self.bc == "absorbing":
            M, b, c = T, 0.0, -1.0
        else:
            r = self.eta / self.operator_eta
            M = (1 + r) * np.eye(T.shape[0]) + (1 - r) * T
            b, c = 2 * np.asarray(self.boundary_data(pts, normals)), -(1 - r)
        return np.linalg.solve(M, b + c * h), M, c

    @property
    def dim(self):
        return self.domain.dim

    def source_at(self, pts):
        return np.broadcast_to(np.asarray(self.source(pts)), pts.shape[:1])

    def boundary_data(self, pts, normals):
        if self.bc == "absorbing":
            return np.zeros(len(pts), dtype=complex)
        if self.g is None:
            raise ValueError(f"problem {self.name!r} has no boundary data")
        if self.bc == "dirichlet":
            return np.asarray(self.g(pts))
        return np.asarray(self.g(pts, normals))

    def operator_at(self, u, grad, hess_diag, pts, hess_mixed=None):
        """Apply the operator to analytic derivative data (for residual checks)."""
        out = 0.0
        for c in self.coeffs:
            vals = c.sample(pts)
            if c.role == "laplacian":
                out = out + vals * sum(hess_diag)
            elif c.role == "second":
                i, j = c.axes
                out = out + vals * (hess_diag[i] if i == j else hess_mixed[(min(i, j), max(i, j))])
            elif c.role == "first":
                out = out + vals * grad[c.axes[0]]
            else:
                out = out + vals * u
        return out


def impedance_from_exact(exact, exact_grad, eta):
    def g(pts, normals):
        gr = exact_grad(pts)
        un = sum(gr[a] * normals[:, a] for a in range(pts.shape[1]))
        return un + 1j * eta * exact(pts)
    return g


# ---------------------------------------------------------------------------
# manufactured 2D problems
# ---------------------------------------------------------------------------

def _dtn_exact(x):
    x1, x2 = x[:, 0], x[:, 1]
    return np.exp(5 * x1) * np.sin(5 * x2) + np.sin(10 * np.pi * x1) * np.sin(np.pi * x2)


def _dtn_grad(x):
    x1, x2 = x[:, 0], x[:, 1]
    e = np.exp(5 * x1)
    return (5 * e * np.sin(5 * x2) + 10 * np.pi * np.cos(10 * np.pi * x1) * np.sin(np.pi * x2),
            5 * e * np.cos(5 * x2) + np.pi * np.sin(10 * np.pi * x1) * np.cos(np.pi * x2))


def _dtn_source(x):
    x1, x2 = x[:, 0], x[:, 1]
    lap = -101 * np.pi ** 2 * np.sin(10 * np.pi * x1) * np.sin(np.pi * x2)
    u1, u2 = _dtn_grad(x)
    return lap - np.cos(5 * x2) * u1 + np.sin(5 * x2) * u2


def make_manufactured_2d_dtn():
    """Variable-coefficient Poisson variant with a known smooth solution."""
    coeffs = (CoefficientField("laplacian", 1.0),
              CoefficientField("first", lambda x: -np.cos(5 * x[:, 1]), (0,)),
              CoefficientField("first", lambda x: np.sin(5 * x[:, 1]), (1,)))
    return ProblemSpec(name="poisson2d", domain=Box.cube(-1.0, 1.0, 2), coeffs=coeffs,
                       source=_dtn_source, bc="dirichlet", g=_dtn_exact,
                       exact=_dtn_exact, exact_grad=_dtn_grad, variant="dtn")


def _iti_exact(x):
    return np.exp(20j * x[:, 0]) + np.exp(30j * x[:, 1])


def _iti_grad(x):
    return (20j * np.exp(20j * x[:, 0]), 30j * np.exp(30j * x[:, 1]))


def _iti_zeroth(x):
    return 1.0 + np.exp(-50 * (x ** 2).sum(axis=1))


def _iti_source(x):
    lap = -400 * np.exp(20j * x[:, 0]) - 900 * np.exp(30j * x[:, 1])
    return lap + _iti_zeroth(x) * _iti_exact(x)


def make_manufactured_2d_iti(eta=1.0, iti_eta=30.0):
    """Inhomogeneous Helmholtz-type problem with Robin data ``u_n + i eta u``.

    ``iti_eta`` is the operators' impedance parameter (see
    :class:`ProblemSpec`).  It defaults to the solution's largest wavenumber;
    with ``iti_eta = 1`` the ItI maps of small leaves lose about two digits.
    """
    coeffs = (CoefficientField("laplacian", 1.0),
              CoefficientField("zeroth", _iti_zeroth))
    return ProblemSpec(name="helmholtz_robin2d", domain=Box.cube(-1.0, 1.0, 2),
                       coeffs=coeffs, source=_iti_source, bc="impedance",
                       g=impedance_from_exact(_iti_exact, _iti_grad, eta),
                       exact=_iti_exact, exact_grad=_iti_grad, variant="iti", eta=eta,
                       iti_eta=iti_eta)


# ---------------------------------------------------------------------------
# scattering
# ---------------------------------------------------------------------------

def gaussian_bump(x):
    return 1.5 * np.exp(-160 * (x ** 2).sum(axis=1))


def random_bumps(n=10, seed=0, width=50.0, spread=0.5):
    """Sum of ``n`` unit Gaussian bumps with centres uniform in ``[-spread, spread]^2``."""
    z = np.random.default_rng(seed).uniform(-spread, spread, size=(n, 2))

    def q(x):
        d2 = ((x[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-width * d2).sum(axis=1)
    q.centers = z
    return q


def make_scattering(k, potential="gauss_bump", shat=(1.0, 0.0), seed=0):
    """Scattered field of a plane wave ``exp(i k <shat, x>)`` off a potential.

    Solves ``Lap u + k^2 (1 + q) u = -k^2 q exp(i k <shat, x>)`` on
    ``[-1, 1]^2`` with the absorbing closure ``u_n - i k u = 0``.
    """
    if not k > 0:
        raise ValueError(f"wavenumber must be positive, got {k}")
    if callable(potential):
        q = potential
    elif potential == "gauss_bump":
        q = gaussian_bump
    elif potential == "random_bumps":
        q = random_bumps(seed=seed)
    elif potential == "zero":
        def q(x):
            return np.zeros(len(x))
    else:
        raise ValueError(f"unknown potential {potential!r}")
    s = np.asarray(shat, dtype=float)
    s = s / np.linalg.norm(s)

    def incident(x):
        return np.exp(1j * k * (x @ s))

    def source(x):
        return -k ** 2 * q(x) * incident(x)

    coeffs = (CoefficientField("laplacian", 1.0),
              CoefficientField("zeroth", lambda x: k ** 2 * (1.0 + q(x))))
    return ProblemSpec(name="scatter2d", domain=Box.cube(-1.0, 1.0, 2), coeffs=coeffs,
                       source=source, bc="absorbing", variant="iti", eta=float(k),
                       k=float(k), params={"q": q, "incident": incident, "shat": s})


# ---------------------------------------------------------------------------
# 3D problems
# ---------------------------------------------------------------------------

def _wave_r(x):
    return np.sqrt(((x - 0.5) ** 2).sum(axis=1))


def wavefront_exact(x):
    return np.arctan(10 * _wave_r(x) - 0.7)


def wavefront_source(x):
    """Laplacian of the radial arctan profile; singular (``~1/r``) at the centre."""
    r = _wave_r(x)
    a = 10 * r - 0.7
    d1 = 10 / (1 + a * a)
    d2 = -200 * a / (1 + a * a) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return d2 + 2 * d1 / r


def make_wavefront_3d():
    coeffs = (CoefficientField("laplacian", 1.0),)
    return ProblemSpec(name="wavefront3d", domain=Box.cube(0.0, 1.0, 3), coeffs=coeffs,
                       source=wavefront_source, bc="dirichlet", g=wavefront_exact,
                       exact=wavefront_exact, variant="dtn",
                       refine_fields=(wavefront_source,))


@dataclass(frozen=True)
class PoissonBoltzmannSpec:
    n_centers: int = 50
    delta: float = 45.0
    eps0: float = 16.0
    eps_inf: float = 100.0
    A: float = 10.0
    permittivity: str = "smooth"  # or "vdw"
    seed: int = 0
    centers: np.ndarray | None = None

    def __post_init__(self):
        if self.permittivity not in ("smooth", "vdw"):
            raise ValueError(f"unknown permittivity model {self.permittivity!r}")
        if self.centers is None:
            z = np.random.default_rng(self.seed).uniform(-0.5, 0.5, size=(self.n_centers, 3))
            object.__setattr__(self, "centers", z)

    def _gauss(self, x):
        """``exp(-delta |x - z_i|^2)`` for every point and center, shape ``(n, N_z)``."""
        x = np.asarray(x, dtype=float)
        z = self.centers
        d2 = (x * x).sum(1)[:, None] + (z * z).sum(1)[None, :] - 2.0 * (x @ z.T)
        return np.exp(-self.delta * np.maximum(d2, 0.0))

    def _weighted_offset(self, x, w):
        """``sum_i w_i (x - z_i)`` for per-center weights ``w`` of shape ``(n, N_z)``."""
        return x * w.sum(1)[:, None] - w @ self.centers

    def rho(self, x):
        return self._gauss(x).sum(axis=1)

    def grad_rho(self, x):
        return -2 * self.delta * self._weighted_offset(x, self._gauss(x))

    def _smooth(self, x, e):
        rho = e.sum(axis=1)
        damp = np.exp(-self.A * rho)
        eps = self.eps0 + (self.eps_inf - self.eps0) * damp
        grad_rho = -2 * self.delta * self._weighted_offset(x, e)
        grad = (-self.A * (self.eps_inf - self.eps0) * damp)[:, None] * grad_rho
        return eps, grad

    def _vdw(self, x, e):
        om = 1.0 - e
        q = 1.0 - np.prod(om, axis=1)
        eps = q * self.eps0 + (1 - q) * (self.eps_inf - self.eps0)
        # products over all factors but one, via prefix/suffix products
        ones = np.ones((len(x), 1))
        pre = np.cumprod(np.hstack([ones, om[:, :-1]]), axis=1)
        suf = np.cumprod(np.hstack([ones, om[:, :0:-1]]), axis=1)[:, ::-1]
        grad_q = -2 * self.delta * self._weighted_offset(x, pre * suf * e)
        return eps, grad_q * (self.eps0 - (self.eps_inf - self.eps0))

    def eps(self, x):
        return self._smooth(x, self._gauss(x))[0]

    def grad_eps(self, x):
        return self._smooth(x, self._gauss(x))[1]

    def vdw_q(self, x):
        return 1.0 - np.prod(1.0 - self._gauss(x), axis=1)

    def eps_vdw(self, x):
        return self._vdw(x, self._gauss(x))[0]

    def grad_eps_vdw(self, x):
        return self._vdw(x, self._gauss(x))[1]

    def permittivity_fns(self):
        if self.permittivity == "smooth":
            return self.eps, self.grad_eps
        return self.eps_vdw, self.grad_eps_vdw

    def all_fields(self, x):
        """Columns ``rho, eps, d eps/dx1, d eps/dx2, d eps/dx3`` from one kernel pass."""
        x = np.asarray(x, dtype=float)
        e = self._gauss(x)
        eps, grad = (self._smooth if self.permittivity == "smooth" else self._vdw)(x, e)
        return np.column_stack([e.sum(axis=1), eps, grad])


def _chunked(fn, chunk=20000):
    def wrapped(x):
        if len(x) <= chunk:
            return fn(x)
        return np.concatenate([fn(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    return wrapped


class _FieldStack:
    """Several scalar fields evaluated together (see ``RefinementCriterion``)."""

    def __init__(self, fn, n_components):
        self.fn = fn
        self.n_components = n_components

    def __call__(self, x):
        return self.fn(x)


def make_poisson_boltzmann(spec: PoissonBoltzmannSpec | None = None):
    """``div(eps grad u) = -rho`` on ``[-1, 1]^3`` with ``u = 0`` on the boundary."""
    spec = spec or PoissonBoltzmannSpec()
    eps, geps = spec.permittivity_fns()
    eps = _chunked(eps)
    geps = _chunked(geps)
    rho = _chunked(spec.rho)

    def grad_comp(a):
        return lambda x: geps(x)[:, a]

    coeffs = (CoefficientField("laplacian", eps),) + tuple(
        CoefficientField("first", grad_comp(a), (a,)) for a in range(3))

    def source(x):
        return -rho(x)

    def g(x):
        return np.zeros(len(x))

    # rho, eps and the three components of grad eps, refined as separate fields
    fields = (_FieldStack(_chunked(spec.all_fields), 5),)
    return ProblemSpec(name="poisson_boltzmann3d", domain=Box.cube(-1.0, 1.0, 3),
                       coeffs=coeffs, source=source, bc="dirichlet", g=g, variant="dtn",
                       refine_fields=fields, params={"pb": spec})


# ---------------------------------------------------------------------------

def error_report(u, u_true):
    """Relative sup-norm and l2 errors of sampled values against a reference."""
    u = np.asarray(u).ravel()
    u_true = np.asarray(u_true).ravel()
    if u.shape != u_true.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {u_true.shape}")
    ninf = np.abs(u_true).max(initial=0.0)
    n2 = np.linalg.norm(u_true)
    if ninf == 0 or n2 == 0:
        raise ValueError("reference has zero norm")
    d = u - u_true
    return {"rel_Linf": float(np.abs(d).max() / ninf), "rel_L2": float(np.linalg.norm(d) / n2)}


PROBLEMS = {
    "poisson2d": make_manufactured_2d_dtn,
    "helmholtz_robin2d": make_manufactured_2d_iti,
    "scatter2d": make_scattering,
    "wavefront3d": make_wavefront_3d,
    "poisson_boltzmann3d": lambda **kw: make_poisson_boltzmann(PoissonBoltzmannSpec(**kw)),
}


def make_problem(name, **params):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**params)
