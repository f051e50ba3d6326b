"""Downward pass: boundary data to leaves, leaf reconstruction and evaluation."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .mesh import leaf_cheb_points
from .spectral import barycentric_interp_matrix, cheb_lobatto_1d


class DownPassError(RuntimeError):
    pass


def propagate(tree, artifacts, g_root):
    """Per-leaf boundary data from root data via ``g_int = S g + g~``.

    ``artifacts`` maps internal node ids to :class:`MergeArtifact`.  Returns a
    list aligned with ``tree.leaves``.  Coarse interface data is expanded to
    the finer child's panels where a merge projected it.
    """
    data = {tree.root.node_id: np.asarray(g_root)}
    for level in tree.levels:
        for node in level:
            if node.is_leaf:
                continue
            art = artifacts.get(node.node_id)
            if art is None:
                raise DownPassError(f"missing merge artifact for node {node.node_id}")
            parts = art.child_data(data.pop(node.node_id))
            for cid, gc in zip(node.children, parts):
                data[cid] = gc
    return [data[leaf.node_id] for leaf in tree.leaves]


@dataclass
class SolutionField:
    """Leaf-major grid values: ``values[i]`` holds leaf ``i``'s ``p^d`` samples."""

    tree: object
    values: np.ndarray
    variant: str = "dtn"

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def points(self):
        return np.vstack([leaf_cheb_points(n, self.tree.p) for n in self.tree.leaves])

    def flat(self):
        return self.values.reshape(-1)

    def evaluate_at(self, points):
        return evaluate_at(self, points)

    # -- dump ---------------------------------------------------------------
    def dump(self, path, tree_ref=None):
        """Write ``<path>.json`` (metadata) and ``<path>.bin`` (raw LE float64).

        Complex values are stored with real and imaginary parts interleaved.
        Both files are written to temporaries and moved into place.
        """
        vals = np.ascontiguousarray(self.values)
        is_complex = np.iscomplexobj(vals)
        raw = vals.astype("<c16" if is_complex else "<f8")
        meta = {"tree_ref": tree_ref, "dtype": "complex128" if is_complex else "float64",
                "leaf_len": int(vals.shape[1]), "n_leaves": int(vals.shape[0]),
                "variant": self.variant, "layout": "leaf-major, point-minor",
                "byte_order": "little"}
        _atomic_write(path + ".bin", raw.tobytes())
        _atomic_write(path + ".json", json.dumps(meta, indent=1).encode())
        return meta

    @classmethod
    def load(cls, path, tree):
        with open(path + ".json") as fh:
            meta = json.load(fh)
        dt = "<c16" if meta["dtype"] == "complex128" else "<f8"
        vals = np.fromfile(path + ".bin", dtype=dt).reshape(meta["n_leaves"], meta["leaf_len"])
        return cls(tree=tree, values=vals.astype(vals.dtype.newbyteorder("=")),
                   variant=meta.get("variant", "dtn"))


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def leaf_reconstruct(leaf_solutions, g_leaves, tree=None, variant="dtn"):
    """``u_i = Y_i g_i + v_i`` for every leaf."""
    vals = []
    for sol, g in zip(leaf_solutions, g_leaves):
        u = sol.Y @ g
        if sol.v is not None:
            u = u + sol.v
        vals.append(u)
    return SolutionField(tree=tree, values=np.array(vals), variant=variant)


def evaluate_at(field: SolutionField, points):
    """Tensor barycentric interpolation from the containing leaf's grid."""
    tree = field.tree
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p, dim = tree.p, tree.dim
    x = cheb_lobatto_1d(p)
    lidx = tree.leaf_index()
    out = np.empty(len(pts), dtype=field.values.dtype)
    for k, pt in enumerate(pts):
        leaf = tree.locate(pt)
        lo = np.array(leaf.box.lo)
        t = 2.0 * (pt - lo) / leaf.box.side - 1.0
        t = np.clip(t, -1.0, 1.0)
        vals = field.values[lidx[leaf.node_id]].reshape((p,) * dim)
        for a in range(dim):
            w = barycentric_interp_matrix(x, t[a:a + 1])[0]
            vals = np.tensordot(w, vals, axes=([0], [0]))
        out[k] = vals
    return out
