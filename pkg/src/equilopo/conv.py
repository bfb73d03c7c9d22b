"""SE(3) group convolution in Wigner-coefficient space on voxel grids.

A voxel field is an array of shape ``(B, X, Y, Z, C, N)``: batch, three
spatial axes, channels and ``N = n_coeff(L)`` Wigner coefficients.

The filter ``w(x, Q) = sum W^{l2 l4}_{a q c}(|x|) D^{l2}_{a q}(Q) Y^c_{l4}(x/|x|)``
lives on the 3x3x3 stencil with weights tied to the four radial classes
``|x|^2 in {0, 1, 2, 3}``. The output is

    h(r, R) = sum_{r0} int dR0 f(r + r0, R0) w(R^-1 r0, R^-1 R0)

which in coefficient space is a per-offset linear map ``S(r0)`` applied to
the input coefficients (see :func:`compile_filter`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Module, Parameter, Tensor, as_tensor, make
from .kernels import degree_offset, n_coeff
from .signal import rotate_coeffs
from .so3_math import Rotation, cg_block, real_spherical_harmonics, wigner_matrix

__all__ = [
    "OFFSETS",
    "RADIAL_CLASSES",
    "Se3Filter",
    "SE3Conv",
    "FilterGeometry",
    "check_degrees",
    "compile_filter",
    "convolve",
    "lift",
    "rotate_filter",
    "rotate_field",
    "avg_pool",
]

# (dx, dy, dz) in index units; the centre is index 13
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
OFFSET_CLASS = (OFFSETS**2).sum(axis=1)
RADIAL_CLASSES = np.sqrt(np.arange(4.0))
CENTER = 13


def check_degrees(L_in: int, L_filter: int, L_out: int, strict: bool = True) -> None:
    """Triangle rule on the maximal degrees.

    With ``strict=False`` only the upper bound is enforced; input degrees
    above ``L_out + L_filter`` then cannot couple to the output and are
    ignored.
    """
    if min(L_in, L_filter, L_out) < 0:
        raise ValueError("degrees must be non-negative")
    if L_out > L_in + L_filter or (strict and L_out < abs(L_in - L_filter)):
        raise ValueError(
            f"degrees violate the triangle rule: |{L_in} - {L_filter}| <= {L_out} <= {L_in} + {L_filter}"
        )


@lru_cache(maxsize=None)
def _offset_harmonics(L: int) -> np.ndarray:
    """Real harmonics at the 27 offset directions, columns ``l*l + l + k``.

    The centre row keeps only the constant harmonic.
    """
    xyz = OFFSETS.astype(np.float64)
    norm = np.linalg.norm(xyz, axis=1)
    dirs = np.where(norm[:, None] > 0, xyz / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    dirs[CENTER] = (0.0, 0.0, 1.0)
    y = real_spherical_harmonics(L, dirs)
    y[CENTER, 1:] = 0.0
    y.flags.writeable = False
    return y


class FilterGeometry:
    """Weight-independent part of the filter compilation for one degree triple.

    For each coupling ``(l1, l2, l4)`` it stores the CG block and the
    harmonic factor ``B[o, k1, p] = sum_g C[k1, p, g] Y^g_{l4}(o) / (2 l2 + 1)``.
    """

    def __init__(self, L_in: int, L_filter: int, L_out: int):
        check_degrees(L_in, L_filter, L_out, strict=False)
        self.L_in, self.L_filter, self.L_out = L_in, L_filter, L_out
        # input degrees above L_out + L_filter cannot couple to any output
        self.L_in_eff = min(L_in, L_out + L_filter)
        self.n_in = n_coeff(self.L_in_eff)
        self.n_out = n_coeff(L_out)
        y = _offset_harmonics(L_filter)
        self.couplings = []
        for l1 in range(L_out + 1):
            for l2 in range(self.L_in_eff + 1):
                for l4 in range(abs(l1 - l2), min(l1 + l2, L_filter) + 1):
                    c = np.array(cg_block(l2, l4, l1))
                    yl = y[:, l4 * l4 : (l4 + 1) ** 2]
                    b = np.einsum("kpg,og->okp", c, yl) / (2 * l2 + 1)
                    self.couplings.append((l1, l2, l4, c, b))

    def weight_shapes(self, c_in: int, c_out: int) -> dict:
        return {
            (l2, l4): (4, c_out, c_in, 2 * l2 + 1, 2 * l2 + 1, 2 * l4 + 1)
            for l2 in range(self.L_in + 1)
            for l4 in range(self.L_filter + 1)
        }


@lru_cache(maxsize=None)
def filter_geometry(L_in: int, L_filter: int, L_out: int) -> FilterGeometry:
    return FilterGeometry(L_in, L_filter, L_out)


@dataclass
class Se3Filter:
    """Plain-array filter description: radial weights per ``(l2, l4)`` pair.

    ``weights[(l2, l4)]`` has shape ``(4, c_out, c_in, 2l2+1, 2l2+1, 2l4+1)``
    indexed ``[radial class, out, in, a, q, c]``.
    """

    L_in: int
    L_filter: int
    L_out: int
    c_in: int
    c_out: int
    weights: dict
    bias: np.ndarray | None = None
    strict: bool = True

    def __post_init__(self):
        check_degrees(self.L_in, self.L_filter, self.L_out, self.strict)
        shapes = filter_geometry(self.L_in, self.L_filter, self.L_out).weight_shapes(self.c_in, self.c_out)
        for key, shape in shapes.items():
            if key not in self.weights:
                self.weights[key] = np.zeros(shape)
            elif self.weights[key].shape != shape:
                raise ValueError(f"weight {key} has shape {self.weights[key].shape}, expected {shape}")

    @classmethod
    def random(cls, rng, L_in, L_filter, L_out, c_in=1, c_out=1, scale=None, strict=True) -> "Se3Filter":
        check_degrees(L_in, L_filter, L_out, strict)
        if scale is None:
            scale = 1.0 / math.sqrt(27.0 * c_in * (L_filter + 1))
        shapes = filter_geometry(L_in, L_filter, L_out).weight_shapes(c_in, c_out)
        w = {k: rng.standard_normal(s) * scale for k, s in shapes.items()}
        return cls(L_in, L_filter, L_out, c_in, c_out, w, strict=strict)

    @property
    def geometry(self) -> FilterGeometry:
        return filter_geometry(self.L_in, self.L_filter, self.L_out)

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values()) + (0 if self.bias is None else self.bias.size)


# ---------------------------------------------------------------------------
# S-tensor compilation
# ---------------------------------------------------------------------------


def _compile(geom: FilterGeometry, weights: dict, c_in: int, c_out: int) -> np.ndarray:
    """``S[o, ci, n_in, co, n_out]`` from the radial weights."""
    S = np.zeros((27, c_in, geom.n_in, c_out, geom.n_out))
    for l1, l2, l4, c, b in geom.couplings:
        n1, n2 = 2 * l1 + 1, 2 * l2 + 1
        a = np.einsum("mac,rxiaqc->rximq", c, weights[(l2, l4)])[OFFSET_CLASS]
        blk = np.einsum("okp,oximq->oipqxkm", b, a).reshape(27, c_in, n2 * n2, c_out, n1 * n1)
        s2, s1 = degree_offset(l2), degree_offset(l1)
        S[:, :, s2 : s2 + n2 * n2, :, s1 : s1 + n1 * n1] += blk
    return S


def _compile_vjp(geom: FilterGeometry, gS: np.ndarray, weights: dict) -> dict:
    grads = {key: np.zeros_like(w) for key, w in weights.items()}
    c_in, c_out = gS.shape[1], gS.shape[3]
    for l1, l2, l4, c, b in geom.couplings:
        n1, n2 = 2 * l1 + 1, 2 * l2 + 1
        s2, s1 = degree_offset(l2), degree_offset(l1)
        g = gS[:, :, s2 : s2 + n2 * n2, :, s1 : s1 + n1 * n1].reshape(27, c_in, n2, n2, c_out, n1, n1)
        ga_off = np.einsum("oipqxkm,okp->oximq", g, b)
        ga = np.zeros((4,) + ga_off.shape[1:])
        np.add.at(ga, OFFSET_CLASS, ga_off)
        grads[(l2, l4)] += np.einsum("mac,rximq->rxiaqc", c, ga)
    return grads


def compile_filter(filt: Se3Filter) -> np.ndarray:
    """Per-offset coefficient map ``S[o, ci, n_in, co, n_out]`` for the 27 offsets in :data:`OFFSETS`.

    ``n_in`` covers input degrees up to ``min(L_in, L_out + L_filter)``.
    """
    return _compile(filt.geometry, filt.weights, filt.c_in, filt.c_out)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def _out_slices(n: int, stride: int, padding: str):
    if padding == "zero":
        start, count = 1, (n + stride - 1) // stride
    elif padding == "none":
        if n < 3:
            raise ValueError("spatial size must be at least 3 without padding")
        start, count = 2, (n - 3) // stride + 1
    else:
        raise ValueError("padding must be 'zero' or 'none'")
    return start, count


def _apply(x: np.ndarray, S: np.ndarray, stride: int, padding: str) -> np.ndarray:
    B, nx, ny, nz, ci, _ = x.shape
    n_in = S.shape[2]
    co, n_out = S.shape[3], S.shape[4]
    xp = np.zeros((B, nx + 2, ny + 2, nz + 2, ci, n_in))
    xp[:, 1:-1, 1:-1, 1:-1] = x[..., :n_in]
    (sx, mx), (sy, my), (sz, mz) = (_out_slices(n, stride, padding) for n in (nx, ny, nz))
    out = np.zeros((B * mx * my * mz, co * n_out))
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        xs = xp[
            :,
            sx + dx : sx + dx + stride * mx : stride,
            sy + dy : sy + dy + stride * my : stride,
            sz + dz : sz + dz + stride * mz : stride,
        ].reshape(-1, ci * n_in)
        out += xs @ S[o].reshape(ci * n_in, co * n_out)
    return out.reshape(B, mx, my, mz, co, n_out)


def _apply_vjp(g: np.ndarray, x: np.ndarray, S: np.ndarray, stride: int, padding: str):
    B, nx, ny, nz, ci, n_full = x.shape
    n_in = S.shape[2]
    co, n_out = S.shape[3], S.shape[4]
    if stride == 1 and padding == "zero":
        return _apply_vjp_same(g, x, S)
    xp = np.zeros((B, nx + 2, ny + 2, nz + 2, ci, n_in))
    xp[:, 1:-1, 1:-1, 1:-1] = x[..., :n_in]
    gxp = np.zeros_like(xp)
    (sx, mx), (sy, my), (sz, mz) = (_out_slices(n, stride, padding) for n in (nx, ny, nz))
    g2 = g.reshape(-1, co * n_out)
    gS = np.empty_like(S)
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        sl = (
            slice(None),
            slice(sx + dx, sx + dx + stride * mx, stride),
            slice(sy + dy, sy + dy + stride * my, stride),
            slice(sz + dz, sz + dz + stride * mz, stride),
        )
        xs = xp[sl].reshape(-1, ci * n_in)
        so = S[o].reshape(ci * n_in, co * n_out)
        gS[o] = (xs.T @ g2).reshape(ci, n_in, co, n_out)
        gxp[sl] += (g2 @ so.T).reshape(B, mx, my, mz, ci, n_in)
    gx = np.zeros_like(x)
    gx[..., :n_in] = gxp[:, 1:-1, 1:-1, 1:-1]
    return gx, gS


def _apply_vjp_same(g, x, S):
    # input gradient is the transposed convolution: flipped offsets, transposed blocks
    B, nx, ny, nz, ci, _ = x.shape
    n_in, co, n_out = S.shape[2], S.shape[3], S.shape[4]
    St = S[::-1].transpose(0, 3, 4, 1, 2)
    gx = np.zeros_like(x)
    gx[..., :n_in] = _apply(g, St, 1, "zero")
    xp = np.zeros((B, nx + 2, ny + 2, nz + 2, ci * n_in))
    xp[:, 1:-1, 1:-1, 1:-1] = x[..., :n_in].reshape(B, nx, ny, nz, -1)
    g2 = g.reshape(-1, co * n_out)
    gS = np.empty_like(S)
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        xs = xp[:, 1 + dx : 1 + dx + nx, 1 + dy : 1 + dy + ny, 1 + dz : 1 + dz + nz].reshape(-1, ci * n_in)
        gS[o] = (xs.T @ g2).reshape(ci, n_in, co, n_out)
    return gx, gS


def convolve(field: np.ndarray, filt: Se3Filter, stride: int = 1, padding: str = "zero") -> np.ndarray:
    """Apply a filter to a voxel field ``(B, X, Y, Z, c_in, n_coeff(L_in))``."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 6:
        raise ValueError("field must have shape (B, X, Y, Z, C, N)")
    if field.shape[-1] != n_coeff(filt.L_in):
        raise ValueError(f"field degree does not match filter L_in={filt.L_in}")
    if field.shape[-2] != filt.c_in:
        raise ValueError(f"field has {field.shape[-2]} channels, filter expects {filt.c_in}")
    out = _apply(field, compile_filter(filt), stride, padding)
    if filt.bias is not None:
        out[..., 0] += filt.bias
    return out


def lift(field_3d: np.ndarray, filt: Se3Filter, stride: int = 1, padding: str = "zero") -> np.ndarray:
    """Scalar volume(s) to an SO(3)-valued field; ``field_3d`` is ``(B, X, Y, Z)`` or ``(B, X, Y, Z, C)``."""
    if filt.L_in != 0:
        raise ValueError("lifting needs a filter with L_in = 0")
    x = np.asarray(field_3d, dtype=np.float64)
    if x.ndim == 4:
        x = x[..., None]
    return convolve(x[..., None], filt, stride, padding)


# ---------------------------------------------------------------------------
# differentiable layer
# ---------------------------------------------------------------------------


def conv_op(x: Tensor, weights: dict, geom: FilterGeometry, c_in: int, c_out: int, stride: int, padding: str) -> Tensor:
    """Taped convolution; the S-tensor is recompiled from the weights every call."""
    keys = sorted(weights)
    x = as_tensor(x)
    wdata = {k: weights[k].data for k in keys}
    S = _compile(geom, wdata, c_in, c_out)
    out = _apply(x.data, S, stride, padding)

    def bw(g):
        gx, gS = _apply_vjp(g, x.data, S, stride, padding)
        gw = _compile_vjp(geom, gS, wdata)
        return (gx,) + tuple(gw[k] for k in keys)

    return make(out, (x,) + tuple(weights[k] for k in keys), bw, "se3_conv")


class SE3Conv(Module):
    """Trainable SE(3) convolution layer."""

    def __init__(
        self, rng, c_in, c_out, L_in, L_filter, L_out, stride=1, padding="zero", bias=False, scale=None, strict=True
    ):
        check_degrees(L_in, L_filter, L_out, strict)
        self.strict = strict
        self.c_in, self.c_out = c_in, c_out
        self.L_in, self.L_filter, self.L_out = L_in, L_filter, L_out
        self.stride, self.padding = stride, padding
        init = Se3Filter.random(rng, L_in, L_filter, L_out, c_in, c_out, scale, strict)
        self.weights = {f"w{l2}_{l4}": Parameter(w) for (l2, l4), w in sorted(init.weights.items())}
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    @property
    def geometry(self) -> FilterGeometry:
        return filter_geometry(self.L_in, self.L_filter, self.L_out)

    def _weight_map(self) -> dict:
        out = {}
        for name, p in self.weights.items():
            l2, l4 = (int(t) for t in name[1:].split("_"))
            out[(l2, l4)] = p
        return out

    def to_filter(self) -> Se3Filter:
        w = {k: p.data.copy() for k, p in self._weight_map().items()}
        b = None if self.bias is None else self.bias.data.copy()
        return Se3Filter(self.L_in, self.L_filter, self.L_out, self.c_in, self.c_out, w, b, self.strict)

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != n_coeff(self.L_in) or x.shape[-2] != self.c_in:
            raise ValueError(
                f"conv expects (..., {self.c_in}, {n_coeff(self.L_in)}), got {x.shape[-2:]}"
            )
        out = conv_op(x, self._weight_map(), self.geometry, self.c_in, self.c_out, self.stride, self.padding)
        if self.bias is not None:
            from .autodiff import pad_last, reshape

            out = out + pad_last(reshape(self.bias, (self.c_out, 1)), n_coeff(self.L_out))
        return out

    def n_params(self, identifiable: bool = False) -> int:
        """Stored weight count, or only the weights that can influence the output."""
        total = sum(p.data.size for p in self.weights.values())
        if self.bias is not None:
            total += self.bias.data.size
        if not identifiable:
            return total
        return identifiable_params(self.L_in, self.L_filter, self.L_out, self.c_in, self.c_out) + (
            0 if self.bias is None else self.c_out
        )


def identifiable_params(L_in, L_filter, L_out, c_in, c_out) -> int:
    """Weights reachable by the output: coupled degree pairs, centre class only for ``l4 = 0``."""
    geom = filter_geometry(L_in, L_filter, L_out)
    pairs = {(l2, l4) for _, l2, l4, _, _ in geom.couplings}
    n = 0
    for l2, l4 in pairs:
        classes = 4 if l4 == 0 else 3
        n += classes * (2 * l2 + 1) ** 2 * (2 * l4 + 1)
    return n * c_in * c_out


# ---------------------------------------------------------------------------
# group actions on filters and fields
# ---------------------------------------------------------------------------


def rotate_filter(filt: Se3Filter, R1: Rotation) -> Se3Filter:
    """Filter whose output is ``h(r, R R1)`` for the original output ``h``.

    ``W'^{l2 l4}_{e q g} = sum_{a, c} D^{l2}_{e a}(R1) D^{l4}_{g c}(R1) W^{l2 l4}_{a q c}``.
    """
    new = {}
    for (l2, l4), w in filt.weights.items():
        d2 = wigner_matrix(l2, R1)
        d4 = wigner_matrix(l4, R1)
        new[(l2, l4)] = np.einsum("ea,gc,rxiaqc->rxieqg", d2, d4, w)
    bias = None if filt.bias is None else filt.bias.copy()
    return Se3Filter(filt.L_in, filt.L_filter, filt.L_out, filt.c_in, filt.c_out, new, bias, filt.strict)


def rotate_field(field: np.ndarray, R1: Rotation, L: int | None = None) -> np.ndarray:
    """Apply a lattice rotation to a field: ``new[r] = D(R1) old[R1^-1 r]``.

    ``R1`` must map the voxel lattice to itself about the grid centre (an
    octahedral rotation on a cubic grid). Pass ``L = None`` to infer the
    degree from the coefficient axis, or rotate a scalar volume by giving a
    ``(B, X, Y, Z)`` array.
    """
    field = np.asarray(field, dtype=np.float64)
    m = R1.as_matrix()
    if not np.allclose(np.abs(m), np.round(np.abs(m)), atol=1e-9):
        raise ValueError("rotate_field needs a lattice (octahedral) rotation")
    perm = np.round(m).astype(np.int64)
    spatial = field.shape[1:4]
    if len(set(spatial)) != 1 and not np.array_equal(np.abs(perm), np.eye(3, dtype=np.int64)):
        raise ValueError("axis-permuting rotations need a cubic grid")
    n = np.array(spatial)
    center = (n - 1) / 2.0
    idx = np.indices(spatial).reshape(3, -1).astype(np.float64) - center[:, None]
    # new[r] reads old[R^T r]
    src = np.rint(perm.T @ idx + center[:, None]).astype(np.int64)
    out = field[:, src[0], src[1], src[2]].reshape(field.shape)
    if field.ndim == 4:
        return out
    if L is None:
        from .signal import max_degree

        L = max_degree(field.shape[-1])
    return rotate_coeffs(out, L, R1, "left")


def avg_pool(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k^3`` spatial average; commutes with lattice rotations on grids divisible by ``k``."""
    x = as_tensor(x)
    B, nx, ny, nz = x.shape[:4]
    if nx % k or ny % k or nz % k:
        raise ValueError(f"spatial dims {x.shape[1:4]} not divisible by {k}")
    rest = x.shape[4:]
    v = x.data.reshape((B, nx // k, k, ny // k, k, nz // k, k) + rest)
    out = v.mean(axis=(2, 4, 6))

    def bw(g):
        ge = g[:, :, None, :, None, :, None] / float(k**3)
        ge = np.broadcast_to(ge, v.shape)
        return (ge.reshape(x.shape),)

    return make(out, (x,), bw, "avg_pool")
