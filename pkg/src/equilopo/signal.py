"""Real functions on SO(3) stored as Wigner coefficients.

Coefficient layout (also the on-disk layout): degree-major, each degree a
contiguous ``(2l+1) x (2l+1)`` block in row-major ``(k1, k2)`` order with
``k`` shifted by ``+l``. A batch of signals keeps the coefficient axis last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .kernels import degree_offset, n_coeff
from .so3_math import Rotation, wigner_blocks, wigner_flat

__all__ = [
    "n_coeff",
    "degree_offset",
    "coeff_index",
    "degree_weights",
    "max_degree",
    "SO3Signal",
    "SignalStats",
    "evaluate",
    "rotate",
    "stats",
    "product",
    "truncate",
    "pad",
    "l2",
    "l1_positive",
]


def coeff_index(l: int, k1: int, k2: int) -> int:
    return degree_offset(l) + (k1 + l) * (2 * l + 1) + (k2 + l)


def max_degree(n: int) -> int:
    L = 0
    while n_coeff(L) < n:
        L += 1
    if n_coeff(L) != n:
        raise ValueError(f"{n} is not a valid coefficient count")
    return L


@lru_cache(maxsize=None)
def _degree_weights(L: int) -> np.ndarray:
    w = np.concatenate([np.full((2 * l + 1) ** 2, 1.0 / (2 * l + 1)) for l in range(L + 1)])
    w.flags.writeable = False
    return w


def degree_weights(L: int) -> np.ndarray:
    """``1/(2l+1)`` per coefficient: the Parseval weights under normalized measure."""
    return _degree_weights(L)


@dataclass(frozen=True)
class SignalStats:
    mean: float | np.ndarray
    std: float | np.ndarray


class SO3Signal:
    """A function on SO(3) (or a batch of them) with max degree ``L``.

    Operations never mutate; each returns a new signal.
    """

    __slots__ = ("coeffs", "L")

    def __init__(self, coeffs, L: int | None = None):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if L is None:
            L = max_degree(coeffs.shape[-1])
        if coeffs.shape[-1] != n_coeff(L):
            raise ValueError(f"expected {n_coeff(L)} coefficients for L={L}, got {coeffs.shape[-1]}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        self.coeffs = coeffs
        self.L = L

    @classmethod
    def zeros(cls, L: int, batch: tuple = ()) -> "SO3Signal":
        return cls(np.zeros(batch + (n_coeff(L),)), L)

    @classmethod
    def constant(cls, c: float, L: int = 0) -> "SO3Signal":
        f = np.zeros(n_coeff(L))
        f[0] = c
        return cls(f, L)

    @classmethod
    def random(cls, rng: np.random.Generator, L: int, batch: tuple = (), decay: float = 0.0) -> "SO3Signal":
        """Gaussian coefficients; block ``l`` scaled by ``(2l+1)**0.5 * (l+1)**-decay``."""
        scale = np.concatenate(
            [np.full((2 * l + 1) ** 2, math.sqrt(2 * l + 1) * (l + 1.0) ** (-decay)) for l in range(L + 1)]
        )
        return cls(rng.standard_normal(batch + (n_coeff(L),)) * scale, L)

    def block(self, l: int) -> np.ndarray:
        s = degree_offset(l)
        n = 2 * l + 1
        return self.coeffs[..., s : s + n * n].reshape(self.coeffs.shape[:-1] + (n, n))

    def __add__(self, other: "SO3Signal") -> "SO3Signal":
        L = max(self.L, other.L)
        return SO3Signal(pad(self, L).coeffs + pad(other, L).coeffs, L)

    def __mul__(self, c: float) -> "SO3Signal":
        return SO3Signal(self.coeffs * c, self.L)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"SO3Signal(L={self.L}, shape={self.coeffs.shape})"

    # method-style access to the module functions
    def evaluate(self, R):
        return evaluate(self, R)

    def rotate(self, R0: Rotation, side: str = "left") -> "SO3Signal":
        return rotate(self, R0, side)

    def stats(self) -> SignalStats:
        return stats(self)

    def truncate(self, L_new: int) -> "SO3Signal":
        return truncate(self, L_new)


def evaluate(f: SO3Signal, R) -> np.ndarray:
    """``sum_l sum_{k1,k2} f^l_{k1k2} D^l_{k1k2}(R)``.

    Output shape is the rotation batch shape followed by the signal batch shape.
    """
    d = wigner_flat(f.L, R)
    return np.tensordot(d, f.coeffs, axes=([-1], [-1]))


def rotate_coeffs(coeffs: np.ndarray, L: int, R0: Rotation, side: str = "left") -> np.ndarray:
    """Left: ``g(R) = f(R0^-1 R)``; right: ``g(R) = f(R R0)``."""
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    blocks = wigner_blocks(L, R0)
    out = np.empty_like(coeffs)
    lead = coeffs.shape[:-1]
    for l, d in enumerate(blocks):
        n = 2 * l + 1
        s = degree_offset(l)
        blk = coeffs[..., s : s + n * n].reshape(lead + (n, n))
        new = d @ blk if side == "left" else blk @ d.T
        out[..., s : s + n * n] = new.reshape(lead + (n * n,))
    return out


def rotate(f: SO3Signal, R0: Rotation, side: str = "left") -> SO3Signal:
    return SO3Signal(rotate_coeffs(f.coeffs, f.L, R0, side), f.L)


def stats(f: SO3Signal) -> SignalStats:
    mu = f.coeffs[..., 0]
    w = degree_weights(f.L)
    var = np.einsum("...n,n->...", f.coeffs[..., 1:] ** 2, w[1:])
    return SignalStats(mu, np.sqrt(var))


def product(f1: SO3Signal, f2: SO3Signal, L_out: int | None = None) -> SO3Signal:
    """Coefficients of the pointwise product; degree ``L1 + L2`` unless truncated."""
    L3 = f1.L + f2.L if L_out is None else L_out
    pt = kernels.product_tensor(f1.L, f2.L, L3)
    lead = np.broadcast_shapes(f1.coeffs.shape[:-1], f2.coeffs.shape[:-1])
    a = np.broadcast_to(f1.coeffs, lead + f1.coeffs.shape[-1:])
    b = np.broadcast_to(f2.coeffs, lead + f2.coeffs.shape[-1:])
    return SO3Signal(kernels.cg_product(a, b, pt), L3)


def truncate(f: SO3Signal, L_new: int) -> SO3Signal:
    if L_new > f.L:
        raise ValueError("truncate cannot raise the degree; use pad")
    return SO3Signal(f.coeffs[..., : n_coeff(L_new)], L_new)


def pad(f: SO3Signal, L_new: int) -> SO3Signal:
    """Zero-block embedding into a higher degree."""
    if L_new < f.L:
        raise ValueError("pad cannot lower the degree; use truncate")
    out = np.zeros(f.coeffs.shape[:-1] + (n_coeff(L_new),))
    out[..., : f.coeffs.shape[-1]] = f.coeffs
    return SO3Signal(out, L_new)


def l2(f: SO3Signal):
    """``sqrt(integral of f^2)`` under normalized Haar measure."""
    return np.sqrt(np.einsum("...n,n->...", f.coeffs**2, degree_weights(f.L)))


def l1_positive(f: SO3Signal):
    """1-norm of a (near-)nonnegative signal, i.e. its mean ``f^0_00``.

    The caller guarantees nonnegativity; it is not checked.
    """
    return f.coeffs[..., 0]
