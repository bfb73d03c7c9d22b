"""Hot inner loops, each with a numba kernel and a pure-numpy fallback.

The dispatch functions at the bottom pick the path from
:func:`equilopo._jit.numba_enabled`. Both paths compute the same thing to
rounding; ``tests/test_kernels.py`` and ``benchmarks/bench_kernels.py``
compare them.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.ndimage
import scipy.sparse

from ._jit import njit, numba_enabled
from .so3_math import cg_block


def n_coeff(L: int) -> int:
    """Number of Wigner coefficients of a signal with max degree ``L``."""
    return (L + 1) * (2 * L + 1) * (2 * L + 3) // 3


def degree_offset(l: int) -> int:
    return l * (2 * l - 1) * (2 * l + 1) // 3


# ---------------------------------------------------------------------------
# sparse Clebsch-Gordan product tensor
# ---------------------------------------------------------------------------


class ProductTensor:
    """COO form of the coefficient-space product ``(L1, L2) -> L_out``.

    ``out[o] += val * a[i] * b[j]`` for every stored entry.
    """

    def __init__(self, L1: int, L2: int, L_out: int):
        self.L1, self.L2, self.L_out = L1, L2, L_out
        outs, ia, ib, vals = [], [], [], []
        for l1 in range(L1 + 1):
            for l2 in range(L2 + 1):
                for l3 in range(abs(l1 - l2), min(l1 + l2, L_out) + 1):
                    c = cg_block(l1, l2, l3)
                    k3, k1, k2 = np.nonzero(c)
                    v = c[k3, k1, k2]
                    n1, n2, n3 = 2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1
                    # rows: (k5, a1, a2); columns: (k6, b1, b2)
                    o = degree_offset(l3) + k3[:, None] * n3 + k3[None, :]
                    i = degree_offset(l1) + k1[:, None] * n1 + k1[None, :]
                    j = degree_offset(l2) + k2[:, None] * n2 + k2[None, :]
                    outs.append(o.ravel())
                    ia.append(i.ravel())
                    ib.append(j.ravel())
                    vals.append((v[:, None] * v[None, :]).ravel())
        out = np.concatenate(outs)
        order = np.lexsort((np.concatenate(ib), np.concatenate(ia), out))
        self.out_idx = out[order].astype(np.int64)
        self.a_idx = np.concatenate(ia)[order].astype(np.int64)
        self.b_idx = np.concatenate(ib)[order].astype(np.int64)
        self.vals = np.concatenate(vals)[order]
        self.na, self.nb, self.nout = n_coeff(L1), n_coeff(L2), n_coeff(L_out)
        # (na*nb, nout) sparse matrix for the numpy path
        self._mat = scipy.sparse.csr_matrix(
            (self.vals, (self.a_idx * self.nb + self.b_idx, self.out_idx)),
            shape=(self.na * self.nb, self.nout),
        )
        self._mat_t = self._mat.T.tocsr()

    @property
    def nnz(self) -> int:
        return self.vals.size


    @property
    def symmetric(self):
        """Entries merged over ``i <= j`` for products of a signal with itself."""
        if self.L1 != self.L2:
            raise ValueError("symmetric form needs equal operand degrees")
        if not hasattr(self, "_sym"):
            i = np.minimum(self.a_idx, self.b_idx)
            j = np.maximum(self.a_idx, self.b_idx)
            key = (self.out_idx * self.na + i) * self.na + j
            uniq, inv = np.unique(key, return_inverse=True)
            vals = np.bincount(inv, weights=self.vals, minlength=uniq.size)
            keep = vals != 0.0
            uniq, vals = uniq[keep], vals[keep]
            self._sym = (uniq // (self.na * self.na), uniq // self.na % self.na, uniq % self.na, vals)
        return self._sym


@lru_cache(maxsize=None)
def product_tensor(L1: int, L2: int, L_out: int | None = None) -> ProductTensor:
    return ProductTensor(L1, L2, L1 + L2 if L_out is None else L_out)


@njit(cache=True, fastmath=False)
def _cg_product_nb(a, b, out_idx, a_idx, b_idx, vals, nout):
    n = a.shape[0]
    out = np.zeros((n, nout))
    for s in range(n):
        for t in range(vals.shape[0]):
            out[s, out_idx[t]] += vals[t] * a[s, a_idx[t]] * b[s, b_idx[t]]
    return out


@njit(cache=True, fastmath=False)
def _cg_product_vjp_nb(g, a, b, out_idx, a_idx, b_idx, vals):
    n = a.shape[0]
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    for s in range(n):
        for t in range(vals.shape[0]):
            w = vals[t] * g[s, out_idx[t]]
            ga[s, a_idx[t]] += w * b[s, b_idx[t]]
            gb[s, b_idx[t]] += w * a[s, a_idx[t]]
    return ga, gb


@njit(cache=True, fastmath=False)
def _cg_square_vjp_nb(g, a, out_idx, i_idx, j_idx, vals):
    n = a.shape[0]
    ga = np.zeros_like(a)
    for s in range(n):
        for t in range(vals.shape[0]):
            w = vals[t] * g[s, out_idx[t]]
            ga[s, i_idx[t]] += w * a[s, j_idx[t]]
            ga[s, j_idx[t]] += w * a[s, i_idx[t]]
    return ga


def _cg_product_np(a, b, pt: ProductTensor):
    outer = (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)
    return np.asarray(outer @ pt._mat)


def _cg_product_vjp_np(g, a, b, pt: ProductTensor):
    gouter = np.asarray(g @ pt._mat_t).reshape(a.shape[0], pt.na, pt.nb)
    ga = np.einsum("nij,nj->ni", gouter, b)
    gb = np.einsum("nij,ni->nj", gouter, a)
    return ga, gb


def cg_product(a: np.ndarray, b: np.ndarray, pt: ProductTensor) -> np.ndarray:
    """Batched coefficient product; ``a``: ``(..., na)``, ``b``: ``(..., nb)``."""
    lead = a.shape[:-1]
    a2 = np.ascontiguousarray(a.reshape(-1, pt.na), dtype=np.float64)
    b2 = np.ascontiguousarray(b.reshape(-1, pt.nb), dtype=np.float64)
    if numba_enabled():
        out = _cg_product_nb(a2, b2, pt.out_idx, pt.a_idx, pt.b_idx, pt.vals, pt.nout)
    else:
        out = _cg_product_np(a2, b2, pt)
    return out.reshape(lead + (pt.nout,))


def cg_product_vjp(g, a, b, pt: ProductTensor):
    lead = a.shape[:-1]
    g2 = np.ascontiguousarray(g.reshape(-1, pt.nout), dtype=np.float64)
    a2 = np.ascontiguousarray(a.reshape(-1, pt.na), dtype=np.float64)
    b2 = np.ascontiguousarray(b.reshape(-1, pt.nb), dtype=np.float64)
    if numba_enabled():
        ga, gb = _cg_product_vjp_nb(g2, a2, b2, pt.out_idx, pt.a_idx, pt.b_idx, pt.vals)
    else:
        ga, gb = _cg_product_vjp_np(g2, a2, b2, pt)
    return ga.reshape(lead + (pt.na,)), gb.reshape(lead + (pt.nb,))


# ---------------------------------------------------------------------------
# trilinear volume resampling (dataset augmentation)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _resample_nb(vol, coords):
    nx, ny, nz = vol.shape
    m = coords.shape[1]
    out = np.zeros(m)
    for t in range(m):
        x, y, z = coords[0, t], coords[1, t], coords[2, t]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx, fy, fz = x - x0, y - y0, z - z0
        acc = 0.0
        for dx in range(2):
            ix = x0 + dx
            if ix < 0 or ix >= nx:
                continue
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                iy = y0 + dy
                if iy < 0 or iy >= ny:
                    continue
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    iz = z0 + dz
                    if iz < 0 or iz >= nz:
                        continue
                    wz = fz if dz else 1.0 - fz
                    acc += wx * wy * wz * vol[ix, iy, iz]
        out[t] = acc
    return out


def rotate_volume(vol: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Rotate a scalar volume about its center, trilinear interpolation, zero fill.

    ``out(p) = vol(R^T (p - c) + c)``, i.e. the content is rotated by ``R``.
    """
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    shape = vol.shape
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1) - center[:, None]
    src = np.asarray(matrix, dtype=np.float64).T @ grid + center[:, None]
    if numba_enabled():
        out = _resample_nb(vol, np.ascontiguousarray(src))
    else:
        out = scipy.ndimage.map_coordinates(vol, src, order=1, mode="grid-constant", cval=0.0)
    return out.reshape(shape)


def cg_square(a: np.ndarray, pt: ProductTensor) -> np.ndarray:
    """Product of a signal batch with itself, ``cg_product(a, a, pt)``."""
    lead = a.shape[:-1]
    a2 = np.ascontiguousarray(a.reshape(-1, pt.na), dtype=np.float64)
    if numba_enabled():
        o, i, j, v = pt.symmetric
        out = _cg_product_nb(a2, a2, o, i, j, v, pt.nout)
    else:
        out = _cg_product_np(a2, a2, pt)
    return out.reshape(lead + (pt.nout,))


def cg_square_vjp(g, a, pt: ProductTensor):
    lead = a.shape[:-1]
    g2 = np.ascontiguousarray(g.reshape(-1, pt.nout), dtype=np.float64)
    a2 = np.ascontiguousarray(a.reshape(-1, pt.na), dtype=np.float64)
    if numba_enabled():
        o, i, j, v = pt.symmetric
        ga = _cg_square_vjp_nb(g2, a2, o, i, j, v)
    else:
        ga, gb = _cg_product_vjp_np(g2, a2, a2, pt)
        ga = ga + gb
    return ga.reshape(lead + (pt.na,))
