"""Independent oracles shared by the tests.

The monolithic oracle assembles the whole composite collocation system of a
tree in one dense matrix: interior collocation rows per leaf, boundary rows
tying leaf grid values to Gauss panel data, and coupling rows between
leaves found by matching Gauss point coordinates.  It shares no code with the
merge layer.
"""
import numpy as np

from hps.local_solve import discretize_operator
from hps.mesh import leaf_cheb_points, leaf_gauss_boundary_points
from hps.spectral import faces_for_dim, leaf_operators


def _key(x):
    return tuple(np.round(np.asarray(x), 12))


def _on_domain_boundary(x, domain):
    lo, hi = np.array(domain.lo), np.array(domain.hi)
    return bool(np.any(np.isclose(x, lo, atol=1e-13) | np.isclose(x, hi, atol=1e-13)))


def _leaf_normals(dim, q):
    out = []
    for axis, side in faces_for_dim(dim):
        n = np.zeros(dim)
        n[axis] = 1.0 if side else -1.0
        out.append(np.tile(n, (q ** (dim - 1), 1)))
    return np.vstack(out)


def monolithic_solve(tree, problem):
    """Dense solve of the composite system; returns per-leaf grid values."""
    p, q, dim = tree.p, tree.q, tree.dim
    base = leaf_operators(p, dim, problem.variant, problem.operator_eta)
    leaves = tree.leaves
    nl, P = len(leaves), p ** dim
    gpts = [leaf_gauss_boundary_points(leaf, q) for leaf in leaves]
    nb = len(gpts[0])
    normals = _leaf_normals(dim, q)
    owners = {}
    for i, pts in enumerate(gpts):
        for j, x in enumerate(pts):
            owners.setdefault(_key(x), []).append((i, j))
    ops = [base.at_side_length(leaf.box.side) for leaf in leaves]
    dtype = complex if problem.variant == "iti" else float
    rows, rhs = [], []

    if problem.variant == "dtn":
        # unknowns: all leaf grids, then one value per interface Gauss point
        iface = {k: n for n, k in enumerate(sorted(k for k, v in owners.items() if len(v) == 2))}
        n_unk = nl * P + len(iface)
        for i, leaf in enumerate(leaves):
            L = discretize_operator(leaf, problem.coeffs, p)
            f = problem.source_at(leaf_cheb_points(leaf, p))
            ii, ie = ops[i].idx.interior, ops[i].idx.exterior
            for r in ii:
                row = np.zeros(n_unk, dtype)
                row[i * P:(i + 1) * P] = L[r]
                rows.append(row)
                rhs.append(f[r])
            for a, r in enumerate(ie):
                row = np.zeros(n_unk, dtype)
                row[i * P + r] = 1.0
                b = 0.0
                for j in np.flatnonzero(ops[i].P[a]):
                    x = gpts[i][j]
                    k = _key(x)
                    if k in iface:
                        row[nl * P + iface[k]] -= ops[i].P[a, j]
                    else:
                        b += ops[i].P[a, j] * problem.boundary_data(x[None], normals[j][None])[0]
                rows.append(row)
                rhs.append(b)
        for k, n in iface.items():
            row = np.zeros(n_unk, dtype)
            for i, j in owners[k]:
                row[i * P:(i + 1) * P] += ops[i].Q[j]
            rows.append(row)
            rhs.append(0.0)
    else:
        # unknowns: all leaf grids, then each leaf's incoming impedance data
        n_unk = nl * P + nl * nb
        for i, leaf in enumerate(leaves):
            L = discretize_operator(leaf, problem.coeffs, p)
            f = problem.source_at(leaf_cheb_points(leaf, p))
            o = ops[i]
            for r in o.idx.interior:
                row = np.zeros(n_unk, dtype)
                row[i * P:(i + 1) * P] = L[r]
                rows.append(row)
                rhs.append(f[r])
            for a in range(o.G.shape[0]):
                row = np.zeros(n_unk, dtype)
                row[i * P:(i + 1) * P] = o.G[a]
                row[nl * P + i * nb:nl * P + (i + 1) * nb] = -o.P[a]
                rows.append(row)
                rhs.append(0.0)
            QH = o.Q @ o.H
            # boundary data u_n + i eta u in terms of the operators' incoming
            # and outgoing data: (1 + r)/2 in + (1 - r)/2 out with r = eta / eta';
            # r = -1 gives the absorbing condition out = 0
            r = -1.0 if problem.bc == "absorbing" else problem.eta / problem.operator_eta
            for j, x in enumerate(gpts[i]):
                row = np.zeros(n_unk, dtype)
                others = [(a, b) for a, b in owners[_key(x)] if a != i]
                if others:
                    row[nl * P + i * nb + j] = 1.0
                    a, b = others[0]
                    row[a * P:(a + 1) * P] += QH[b]
                    rhs.append(0.0)
                else:
                    row[nl * P + i * nb + j] = (1 + r) / 2
                    row[i * P:(i + 1) * P] += (1 - r) / 2 * QH[j]
                    rhs.append(problem.boundary_data(x[None], normals[j][None])[0])
                rows.append(row)
    A = np.array(rows)
    sol = np.linalg.solve(A, np.array(rhs, dtype=dtype))
    return sol[:nl * P].reshape(nl, P)


def dense_merge_oracle(children_T, children_h, children_pts, parent_pts, variant):
    """Parent ``T``, ``h`` and interface solve by coordinate matching.

    ``children_pts[c]`` lists child ``c``'s boundary point coordinates in its
    operator order; ``parent_pts`` gives the parent's exterior order.
    Returns ``(T, h, solve)`` where ``solve(g_ext)`` returns each child's
    boundary data.
    """
    nch = len(children_T)
    owners = {}
    for c, pts in enumerate(children_pts):
        for j, x in enumerate(pts):
            owners.setdefault(_key(x), []).append((c, j))
    ext = [_key(x) for x in parent_pts]
    ext_set = set(ext)
    dtype = np.result_type(*children_T, *children_h)
    sizes = [len(p) for p in children_pts]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    ntot = offs[-1]
    if variant == "dtn":
        # one unknown per point: exterior given, interface solved from flux balance
        ikeys = sorted(k for k in owners if k not in ext_set)
        allkeys = ext + ikeys
        pos = {k: n for n, k in enumerate(allkeys)}
        E = np.zeros((ntot, len(allkeys)))  # child boundary data from point values
        for c in range(nch):
            for j, x in enumerate(children_pts[c]):
                E[offs[c] + j, pos[_key(x)]] = 1.0
        Tbd = _blockdiag(children_T, dtype)
        hb = np.concatenate(children_h)
        F = Tbd @ E  # all child fluxes as functions of point values
        Fh = hb
        # flux balance rows at interface points: sum over the two children
        S = np.zeros((len(ikeys), ntot))
        for n, k in enumerate(ikeys):
            for c, j in owners[k]:
                S[n, offs[c] + j] = 1.0
        ne = len(ext)
        M = S @ F
        Aii, Aie = M[:, ne:], M[:, :ne]
        X = -np.linalg.solve(Aii, Aie)
        x0 = -np.linalg.solve(Aii, S @ Fh)
        # parent flux at exterior points from the owning child
        R = np.zeros((ne, ntot))
        for n, k in enumerate(ext):
            c, j = owners[k][0]
            R[n, offs[c] + j] = 1.0
        full = np.vstack([np.eye(ne), X])
        T = R @ F @ full
        h = R @ (F[:, ne:] @ x0 + Fh)

        def solve(g):
            vals = np.concatenate([g, X @ g + x0])
            gb = E @ vals
            return [gb[offs[c]:offs[c + 1]] for c in range(nch)]
        return T, h, solve
    # impedance: unknown incoming data at every child point
    Tbd = _blockdiag(children_T, dtype)
    hb = np.concatenate(children_h)
    # incoming at interface point of child c equals minus outgoing of the neighbour
    Kmat = np.zeros((ntot, ntot), dtype)
    ext_rows = []
    for c in range(nch):
        for j, x in enumerate(children_pts[c]):
            k = _key(x)
            if k in ext_set:
                ext_rows.append((offs[c] + j, ext.index(k)))
                continue
            (a, b), = [(a, b) for a, b in owners[k] if a != c]
            Kmat[offs[c] + j, offs[a] + b] = -1.0
    ne = len(ext)
    Pin = np.zeros((ntot, ne))
    for r, n in ext_rows:
        Pin[r, n] = 1.0
    # g = Pin g_ext + K (Tbd g + hb)  ->  (I - K Tbd) g = Pin g_ext + K hb
    Msys = np.eye(ntot) - Kmat @ Tbd
    G = np.linalg.solve(Msys, Pin)
    g0 = np.linalg.solve(Msys, Kmat @ hb)
    R = np.zeros((ne, ntot))
    for r, n in ext_rows:
        R[n, r] = 1.0
    T = R @ Tbd @ G
    h = R @ (Tbd @ g0 + hb)

    def solve(g):
        gb = G @ g + g0
        return [gb[offs[c]:offs[c + 1]] for c in range(nch)]
    return T, h, solve


def _blockdiag(mats, dtype):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n), dtype)
    o = 0
    for m in mats:
        k = m.shape[0]
        out[o:o + k, o:o + k] = m
        o += k
    return out
