"""Rotations, real spherical harmonics, real Wigner matrices and Clebsch-Gordan tables.

Conventions used throughout the package:

* rotations are active; Euler angles are ZYZ, ``R = Rz(alpha) Ry(beta) Rz(gamma)``;
* real spherical harmonics are orthonormal on the sphere, ordered ``k = -l..l``,
  with ``k > 0`` the cosine family and ``k < 0`` the sine family (no
  Condon-Shortley phase);
* the real Wigner matrix is defined by ``Y_l(R w) = D^l(R) Y_l(w)``, so that
  ``D^l(R1 R2) = D^l(R1) D^l(R2)`` and ``D^l(R^-1) = D^l(R)^T``;
* integrals over SO(3) use the normalized Haar measure (total volume 1).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

__all__ = [
    "Rotation",
    "octahedral_group",
    "real_spherical_harmonics",
    "real_spherical_harmonic",
    "wigner_matrix",
    "wigner_blocks",
    "wigner_flat",
    "complex_clebsch_gordan",
    "clebsch_gordan",
    "cg_block",
    "CGTable",
    "QuadratureGrid",
    "so3_quadrature",
    "s2_quadrature",
]


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


class Rotation:
    """A rotation (or a batch of rotations) stored as unit quaternions ``(w, x, y, z)``.

    The quaternion sign is canonicalized so that ``w >= 0``.
    """

    __slots__ = ("q",)

    def __init__(self, q):
        self.q = _canonical(q)

    # construction -----------------------------------------------------
    @classmethod
    def identity(cls, n: int | None = None) -> "Rotation":
        q = np.zeros((4,) if n is None else (n, 4))
        q[..., 0] = 1.0
        return cls(q)

    @classmethod
    def random(cls, rng: np.random.Generator, n: int | None = None) -> "Rotation":
        """Haar-uniform rotations (normalized Gaussian quaternions)."""
        shape = (4,) if n is None else (n, 4)
        return cls(rng.standard_normal(shape))

    @classmethod
    def from_axis_angle(cls, axis, angle) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
        half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
        return cls(np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1))

    @classmethod
    def from_euler_zyz(cls, alpha, beta, gamma) -> "Rotation":
        alpha, beta, gamma = np.broadcast_arrays(
            np.asarray(alpha, float), np.asarray(beta, float), np.asarray(gamma, float)
        )
        ez = np.array([0.0, 0.0, 1.0])
        ey = np.array([0.0, 1.0, 0.0])
        return (
            cls.from_axis_angle(ez, alpha)
            @ cls.from_axis_angle(ey, beta)
            @ cls.from_axis_angle(ez, gamma)
        )

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        m = np.asarray(m, dtype=np.float64)
        batch = m.shape[:-2]
        m = m.reshape(-1, 3, 3)
        q = np.empty((m.shape[0], 4))
        for i, a in enumerate(m):
            # Shepperd's method: pick the largest diagonal combination.
            tr = np.trace(a)
            cands = np.array([tr, a[0, 0], a[1, 1], a[2, 2]])
            j = int(np.argmax(cands))
            if j == 0:
                s = 2.0 * math.sqrt(1.0 + tr)
                q[i] = [0.25 * s, (a[2, 1] - a[1, 2]) / s, (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s]
            elif j == 1:
                s = 2.0 * math.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2])
                q[i] = [(a[2, 1] - a[1, 2]) / s, 0.25 * s, (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s]
            elif j == 2:
                s = 2.0 * math.sqrt(1.0 + a[1, 1] - a[0, 0] - a[2, 2])
                q[i] = [(a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s, 0.25 * s, (a[1, 2] + a[2, 1]) / s]
            else:
                s = 2.0 * math.sqrt(1.0 + a[2, 2] - a[0, 0] - a[1, 1])
                q[i] = [(a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s, (a[1, 2] + a[2, 1]) / s, 0.25 * s]
        return cls(q.reshape(batch + (4,)))

    # algebra ----------------------------------------------------------
    def __matmul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = np.moveaxis(self.q, -1, 0)
        w2, x2, y2, z2 = np.moveaxis(other.q, -1, 0)
        q = np.stack(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ],
            axis=-1,
        )
        return Rotation(q)

    compose = __matmul__

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def __len__(self) -> int:
        return 1 if self.q.ndim == 1 else self.q.shape[0]

    def __getitem__(self, idx) -> "Rotation":
        return Rotation(self.q[idx])

    @property
    def batched(self) -> bool:
        return self.q.ndim > 1

    # conversions ------------------------------------------------------
    def as_matrix(self) -> np.ndarray:
        w, x, y, z = np.moveaxis(self.q, -1, 0)
        m = np.stack(
            [
                1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
            ],
            axis=-1,
        )
        return m.reshape(self.q.shape[:-1] + (3, 3))

    def as_euler_zyz(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.as_matrix()
        sb = np.hypot(m[..., 0, 2], m[..., 1, 2])
        beta = np.arctan2(sb, m[..., 2, 2])
        regular = sb > 1e-12
        alpha = np.where(regular, np.arctan2(m[..., 1, 2], m[..., 0, 2]), 0.0)
        gamma = np.where(regular, np.arctan2(m[..., 2, 1], -m[..., 2, 0]), 0.0)
        # gimbal lock: fold everything into alpha
        at_zero = ~regular & (m[..., 2, 2] > 0)
        at_pi = ~regular & (m[..., 2, 2] <= 0)
        alpha = np.where(at_zero, np.arctan2(m[..., 1, 0], m[..., 0, 0]), alpha)
        alpha = np.where(at_pi, np.arctan2(-m[..., 1, 0], m[..., 1, 1]), alpha)
        return alpha, beta, gamma

    def apply(self, v) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.as_matrix(), np.asarray(v, dtype=np.float64))

    def __repr__(self) -> str:
        return f"Rotation({self.q!r})"


def octahedral_group() -> list[np.ndarray]:
    """The 24 rotation matrices mapping the cubic lattice onto itself."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3))
            for i, (p, s) in enumerate(zip(perm, signs)):
                m[i, p] = s
            if np.linalg.det(m) > 0:
                mats.append(m)
    return mats


# ---------------------------------------------------------------------------
# real spherical harmonics
# ---------------------------------------------------------------------------


def real_spherical_harmonics(L: int, xyz) -> np.ndarray:
    """All real harmonics up to degree ``L`` at unit vectors ``xyz``.

    Returns shape ``(..., (L+1)**2)`` with degree ``l``, order ``k`` at
    column ``l*l + l + k``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    out = np.zeros(xyz.shape[:-1] + ((L + 1) ** 2,))
    # q[l][m] holds P̄_l^m(z) / sin^m(theta), a polynomial in z.
    q = [[None] * (L + 1) for _ in range(L + 1)]
    q[0][0] = np.full(z.shape, 1.0 / math.sqrt(4.0 * math.pi))
    for m in range(1, L + 1):
        q[m][m] = math.sqrt((2 * m + 1) / (2.0 * m)) * q[m - 1][m - 1]
    for m in range(0, L):
        q[m + 1][m] = math.sqrt(2 * m + 3) * z * q[m][m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            q[l][m] = a * (z * q[l - 1][m] - b * q[l - 2][m])
    # sin^m(theta) e^{i m phi} = (x + i y)^m on the unit sphere
    c = [np.ones_like(x)]
    s = [np.zeros_like(x)]
    for m in range(1, L + 1):
        c.append(c[-1] * x - s[-1] * y)
        s.append(s[-1] * x + c[-2] * y)
    root2 = math.sqrt(2.0)
    for l in range(L + 1):
        base = l * l + l
        out[..., base] = q[l][0]
        for m in range(1, l + 1):
            out[..., base + m] = root2 * q[l][m] * c[m]
            out[..., base - m] = root2 * q[l][m] * s[m]
    return out


def real_spherical_harmonic(l: int, k: int, omega) -> np.ndarray:
    if abs(k) > l:
        raise ValueError(f"|k| must not exceed l (got l={l}, k={k})")
    return real_spherical_harmonics(l, omega)[..., l * l + l + k]


# ---------------------------------------------------------------------------
# real Wigner matrices
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _complex_to_real(l: int) -> np.ndarray:
    """Unitary ``U`` with ``Y_real = U @ Y_complex`` (complex harmonics with Condon-Shortley phase)."""
    n = 2 * l + 1
    u = np.zeros((n, n), dtype=np.complex128)
    r = 1.0 / math.sqrt(2.0)
    u[l, l] = 1.0
    for m in range(1, l + 1):
        sgn = (-1) ** m
        u[l + m, l + m] = sgn * r
        u[l + m, l - m] = r
        u[l - m, l + m] = -1j * sgn * r
        u[l - m, l - m] = 1j * r
    return u


@lru_cache(maxsize=None)
def _y_rotation_eigensystem(l: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of the real-basis generator of rotations about y.

    The generator is ``i U J_y U^H`` (real antisymmetric); ``exp(beta G)`` is
    the real Wigner matrix of ``Ry(beta)``. Returns ``(V, m)`` with
    ``G = V diag(i m) V^H``.
    """
    n = 2 * l + 1
    m = np.arange(-l, l + 1, dtype=np.float64)
    jp = np.zeros((n, n))
    for i in range(n - 1):
        mm = m[i]
        jp[i + 1, i] = math.sqrt(l * (l + 1) - mm * (mm + 1))
    jy = (jp - jp.T) / 2j
    u = _complex_to_real(l)
    g = (u @ (-1j * jy) @ u.conj().T).real
    g = 0.5 * (g - g.T)
    # G is real antisymmetric -> -iG Hermitian with eigenvalues exactly -l..l
    w, v = np.linalg.eigh(-1j * g)
    order = np.argsort(w)
    return v[:, order], np.round(w[order])


def _z_rotation(l: int, angle: np.ndarray) -> np.ndarray:
    """Real Wigner matrix of ``Rz(angle)``, batched over ``angle``."""
    angle = np.asarray(angle, dtype=np.float64)
    n = 2 * l + 1
    out = np.zeros(angle.shape + (n, n))
    k = np.arange(-l, l + 1)
    ka = angle[..., None] * k
    idx = np.arange(n)
    out[..., idx, idx] = np.cos(ka)
    out[..., idx, idx[::-1]] = -np.sin(ka)
    out[..., l, l] = 1.0
    return out


def _y_rotation(l: int, beta: np.ndarray) -> np.ndarray:
    v, m = _y_rotation_eigensystem(l)
    phase = np.exp(1j * np.asarray(beta, dtype=np.float64)[..., None] * m)
    return np.einsum("ik,...k,jk->...ij", v, phase, v.conj()).real


def _euler(R) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(R, Rotation):
        return R.as_euler_zyz()
    a, b, g = R
    return np.asarray(a, float), np.asarray(b, float), np.asarray(g, float)


def wigner_matrix(l: int, R) -> np.ndarray:
    """Real Wigner matrix ``D^l(R)``; ``R`` is a :class:`Rotation` or ZYZ angle triple.

    Batched rotations give an array of shape ``(N, 2l+1, 2l+1)``.
    """
    if l < 0:
        raise ValueError("degree must be non-negative")
    alpha, beta, gamma = _euler(R)
    return _z_rotation(l, alpha) @ _y_rotation(l, beta) @ _z_rotation(l, gamma)


def wigner_blocks(L: int, R) -> list[np.ndarray]:
    alpha, beta, gamma = _euler(R)
    return [_z_rotation(l, alpha) @ _y_rotation(l, beta) @ _z_rotation(l, gamma) for l in range(L + 1)]


def wigner_flat(L: int, R) -> np.ndarray:
    """All ``D^l_{k1 k2}(R)``, ``l <= L``, flattened in signal coefficient layout."""
    blocks = wigner_blocks(L, R)
    lead = blocks[0].shape[:-2]
    return np.concatenate([b.reshape(lead + (-1,)) for b in blocks], axis=-1)


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def complex_clebsch_gordan(j1: int, m1: int, j2: int, m2: int, J: int, M: int) -> float:
    """Standard (Condon-Shortley) coefficient ``<j1 m1 j2 m2 | J M>`` via Racah's formula."""
    if M != m1 + m2 or not abs(j1 - j2) <= J <= j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    f = math.factorial
    pre = Fraction(
        (2 * J + 1) * f(J + j1 - j2) * f(J - j1 + j2) * f(j1 + j2 - J),
        f(j1 + j2 + J + 1),
    ) * (f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = Fraction(0)
    for k in range(0, j1 + j2 - J + 1):
        args = (j1 + j2 - J - k, j1 - m1 - k, j2 + m2 - k, J - j2 + m1 + k, J - j1 - m2 + k)
        if min(args) < 0:
            continue
        denom = f(k)
        for a in args:
            denom *= f(a)
        total += Fraction((-1) ** k, denom)
    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * math.sqrt(pre * total * total)


@lru_cache(maxsize=None)
def cg_block(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real coefficients ``C[k3, k1, k2] = <l3 k3 | l1 k1 l2 k2>``.

    Zero array when the degrees violate the triangle rule.
    """
    out = np.zeros((2 * l3 + 1, 2 * l1 + 1, 2 * l2 + 1))
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        out.flags.writeable = False
        return out
    q = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            M = m1 + m2
            if abs(M) <= l3:
                q[m1 + l1, m2 + l2, M + l3] = complex_clebsch_gordan(l1, m1, l2, m2, l3, M)
    u1, u2, u3 = _complex_to_real(l1), _complex_to_real(l2), _complex_to_real(l3)
    c = np.einsum("ai,bj,ijk,ck->cab", u1, u2, q, u3.conj())
    # c equals a real intertwiner times a global phase
    flat = c.ravel()
    pivot = flat[np.argmax(np.abs(flat))]
    c = (c * (abs(pivot) / pivot)).real
    c[np.abs(c) < 1e-15] = 0.0
    c.flags.writeable = False
    return c


def clebsch_gordan(l1: int, k1: int, l2: int, k2: int, l3: int, k3: int) -> float:
    """Real-basis ``<l3 k3 | l1 k1 l2 k2>``; zero outside the selection rules."""
    if min(l1, l2, l3) < 0 or abs(k1) > l1 or abs(k2) > l2 or abs(k3) > l3:
        return 0.0
    return float(cg_block(l1, l2, l3)[k3 + l3, k1 + l1, k2 + l2])


@dataclass
class CGTable:
    """Real Clebsch-Gordan blocks for all degree triples with ``l1, l2 <= L_max``."""

    L_max: int
    blocks: dict

    @classmethod
    def build(cls, L_max: int) -> "CGTable":
        blocks = {}
        for l1 in range(L_max + 1):
            for l2 in range(L_max + 1):
                for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                    blocks[(l1, l2, l3)] = cg_block(l1, l2, l3)
        return cls(L_max, blocks)

    def __call__(self, l1, k1, l2, k2, l3, k3) -> float:
        blk = self.blocks.get((l1, l2, l3))
        if blk is None or abs(k1) > l1 or abs(k2) > l2 or abs(k3) > l3:
            return 0.0
        return float(blk[k3 + l3, k1 + l1, k2 + l2])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"cg/{l1}/{l2}/{l3}": np.array(b) for (l1, l2, l3), b in self.blocks.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "CGTable":
        blocks = {}
        for name, arr in arrays.items():
            if not name.startswith("cg/"):
                continue
            l1, l2, l3 = (int(t) for t in name.split("/")[1:])
            blocks[(l1, l2, l3)] = np.asarray(arr, dtype=np.float64)
        L_max = max(max(l1, l2) for l1, l2, _ in blocks) if blocks else 0
        return cls(L_max, blocks)


# ---------------------------------------------------------------------------
# quadrature (oracle only)
# ---------------------------------------------------------------------------


@dataclass
class QuadratureGrid:
    """Nodes and normalized weights; ``euler`` holds ZYZ angle arrays."""

    band_limit: int
    euler: tuple[np.ndarray, np.ndarray, np.ndarray]
    weights: np.ndarray

    @property
    def rotations(self) -> Rotation:
        return Rotation.from_euler_zyz(*self.euler)

    def __len__(self) -> int:
        return self.weights.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples laid out with the node axis first."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def so3_quadrature(band_limit: int) -> QuadratureGrid:
    """Product grid exact for integrands of total Wigner degree up to ``2 * band_limit``.

    In particular it integrates any product of two Wigner matrices of degree
    ``<= band_limit`` exactly.
    """
    if band_limit < 0:
        raise ValueError("band_limit must be non-negative")
    b = band_limit
    n_az = 2 * b + 1
    az = 2.0 * math.pi * np.arange(n_az) / n_az
    x, w = np.polynomial.legendre.leggauss(b + 1)
    beta = np.arccos(x)
    A, B, G = np.meshgrid(az, beta, az, indexing="ij")
    W = np.ones(n_az)[:, None, None] * (w / 2.0)[None, :, None] * np.ones(n_az)[None, None, :]
    W = W / (n_az * n_az)
    return QuadratureGrid(b, (A.ravel(), B.ravel(), G.ravel()), W.ravel())


def s2_quadrature(band_limit: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors and weights (summing to 4 pi) exact for harmonics products up to degree ``2*band_limit``."""
    b = band_limit
    n_az = 2 * b + 1
    phi = 2.0 * math.pi * np.arange(n_az) / n_az
    x, w = np.polynomial.legendre.leggauss(b + 1)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1.0 - ct * ct)
    xyz = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    weights = (w[:, None] * np.full(n_az, 2.0 * math.pi / n_az)[None, :]).ravel()
    return xyz, weights
