"""Brute-force reference evaluations by quadrature, independent of the CG machinery."""

from __future__ import annotations

import numpy as np

from .conv import OFFSET_CLASS, OFFSETS, Se3Filter
from .so3_math import Rotation, real_spherical_harmonics, so3_quadrature, wigner_blocks, wigner_flat


def conv_center(f: np.ndarray, filt: Se3Filter, band: int | None = None) -> np.ndarray:
    """Output coefficients at the center voxel of a ``3^3`` single-channel input.

    Evaluates ``h(R) = sum_r0 int dR0 f(r0, R0) w(R^-1 r0, R^-1 R0)`` on a
    quadrature grid and projects ``h`` back onto Wigner matrices up to
    ``L_out``. ``f`` has shape ``(3, 3, 3, n_coeff(L_in))``.
    """
    if filt.c_in != 1 or filt.c_out != 1:
        raise ValueError("oracle handles single-channel filters")
    L_in, Lf, L_out = filt.L_in, filt.L_filter, filt.L_out
    q = so3_quadrature(band if band is not None else max(L_in + Lf, L_out + Lf, 1))
    Rs, w = q.rotations, q.weights
    N = w.size
    mats = Rs.as_matrix()
    fvals = np.einsum("jn,abcn->abcj", wigner_flat(L_in, Rs), f)
    qi = np.repeat(Rs.inverse().q[:, None, :], N, axis=1).reshape(-1, 4)
    qj = np.repeat(Rs.q[None, :, :], N, axis=0).reshape(-1, 4)
    d_rel = wigner_blocks(max(filt.L_in, max((l2 for l2, _ in filt.weights), default=0)), Rotation(qi) @ Rotation(qj))
    h = np.zeros(N)
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        cls = OFFSET_CLASS[o]
        if cls == 0:
            Y = np.zeros((N, (Lf + 1) ** 2))
            Y[:, 0] = 0.5 / np.sqrt(np.pi)
        else:
            v = np.array([dx, dy, dz], dtype=np.float64)
            Y = real_spherical_harmonics(Lf, np.einsum("iba,b->ia", mats, v / np.linalg.norm(v)))
        kern = np.zeros((N, N))
        for (l2, l4), W in filt.weights.items():
            D = d_rel[l2].reshape(N, N, 2 * l2 + 1, 2 * l2 + 1)
            kern += np.einsum("aqc,ijaq,ic->ij", W[cls, 0, 0], D, Y[:, l4 * l4 : (l4 + 1) ** 2])
        h += kern @ (w * fvals[1 + dx, 1 + dy, 1 + dz])
    deg = np.concatenate([np.full((2 * l + 1) ** 2, 2 * l + 1.0) for l in range(L_out + 1)])
    out = deg * ((w * h) @ wigner_flat(L_out, Rs))
    if filt.bias is not None:
        out[0] += filt.bias[0]
    return out


def project(values: np.ndarray, L: int, band: int) -> tuple[np.ndarray, Rotation]:
    """Quadrature nodes for ``band`` and the projection of sampled values onto degree ``<= L``."""
    q = so3_quadrature(band)
    deg = np.concatenate([np.full((2 * l + 1) ** 2, 2 * l + 1.0) for l in range(L + 1)])
    return deg * ((q.weights * values) @ wigner_flat(L, q.rotations)), q.rotations
