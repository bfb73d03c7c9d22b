"""Synthetic rotated-motif classification data.

Three classes of thin tubular curves with equal arc length: an L (two
perpendicular arms), a T (a bar with a perpendicular stem from its middle)
and a helix. Curves are rasterized with a Gaussian profile, centered on the
grid, optionally rotated, and corrupted with Gaussian noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .kernels import rotate_volume
from .so3_math import Rotation, octahedral_group

CLASS_NAMES = ("L", "T", "helix")
ROTATION_MODES = ("none", "octahedral", "uniform")
SPLITS = ("train", "val", "test")


@dataclass
class DatasetSpec:
    classes: int = 3
    size: int = 16
    arc_length: float = 12.0
    tube_sigma: float = 0.8
    noise: float = 0.05
    shift: float = 0.5
    counts: dict = field(default_factory=lambda: {"train": 600, "val": 60, "test": 150})
    rotations: dict = field(default_factory=lambda: {"train": "none", "val": "none", "test": "uniform"})
    seed: int = 0

    def validate(self) -> None:
        if self.classes != len(CLASS_NAMES):
            raise ValueError(f"only {len(CLASS_NAMES)} motif classes are defined")
        if self.size < 8:
            raise ValueError("size must be at least 8")
        if self.arc_length <= 0 or self.tube_sigma <= 0 or self.noise < 0 or self.shift < 0:
            raise ValueError("arc_length and tube_sigma must be positive, noise and shift non-negative")
        # every motif lies within 0.45 * arc_length of its centroid
        if 0.45 * self.arc_length + self.shift + 1.5 * self.tube_sigma > (self.size - 1) / 2:
            raise ValueError("motif does not fit the grid under rotation")
        for s in SPLITS:
            n = self.counts.get(s, 0)
            if n < 0 or n % self.classes:
                raise ValueError(f"count for split {s!r} must be a non-negative multiple of {self.classes}")
            if self.rotations.get(s, "none") not in ROTATION_MODES:
                raise ValueError(f"rotation mode for split {s!r} must be one of {ROTATION_MODES}")
        if set(self.counts) - set(SPLITS) or set(self.rotations) - set(SPLITS):
            raise ValueError(f"splits must be among {SPLITS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _polyline(corners: np.ndarray, step: float) -> np.ndarray:
    pts = []
    for a, b in zip(corners[:-1], corners[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        pts.append(a + (b - a) * (np.arange(n) / n)[:, None])
    pts.append(corners[-1:])
    return np.concatenate(pts)


def motif_points(label: int, rng: np.random.Generator, arc_length: float, step: float = 0.25) -> np.ndarray:
    """Sample points along a jittered curve of the given class, centroid at the origin."""
    ell = arc_length
    if label == 0:
        frac = rng.uniform(0.4, 0.6)
        angle = np.deg2rad(90.0 + rng.uniform(-10.0, 10.0))
        a, b = frac * ell, (1.0 - frac) * ell
        corners = np.array([[a, 0.0, 0.0], [0.0, 0.0, 0.0], [b * np.cos(angle), b * np.sin(angle), 0.0]])
        pts = _polyline(corners, step)
    elif label == 1:
        stem = rng.uniform(0.28, 0.38) * ell
        half = (ell - stem) / 2.0
        angle = np.deg2rad(90.0 + rng.uniform(-10.0, 10.0))
        bar = _polyline(np.array([[-half, 0.0, 0.0], [half, 0.0, 0.0]]), step)
        leg = _polyline(np.array([[0.0, 0.0, 0.0], [stem * np.cos(angle), stem * np.sin(angle), 0.0]]), step)
        pts = np.concatenate([bar, leg[1:]])
    elif label == 2:
        radius = rng.uniform(1.1, 1.4)
        pitch = rng.uniform(2.0, 2.6)
        c = np.hypot(2 * np.pi * radius, pitch)
        turns = ell / c
        t = np.linspace(0.0, 2 * np.pi * turns, max(int(ell / step), 2))
        pts = np.stack([radius * np.cos(t), radius * np.sin(t), pitch * t / (2 * np.pi)], axis=1)
    else:
        raise ValueError(f"unknown class label {label}")
    return pts - pts.mean(axis=0)


def rasterize(points: np.ndarray, size: int, sigma: float, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Sum of Gaussian blobs along the curve, peak-normalized to 1."""
    center = (size - 1) / 2.0 + np.asarray(offset, dtype=np.float64)
    ax = np.arange(size, dtype=np.float64)
    p = points + center
    gx = np.exp(-((ax[None, :] - p[:, 0:1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ax[None, :] - p[:, 1:2]) ** 2) / (2 * sigma**2))
    gz = np.exp(-((ax[None, :] - p[:, 2:3]) ** 2) / (2 * sigma**2))
    vol = np.einsum("px,py,pz->xyz", gx, gy, gz)
    m = vol.max()
    return vol / m if m > 0 else vol


def _rotation(mode: str, rng: np.random.Generator, octa: list) -> Rotation:
    if mode == "none":
        return Rotation.identity()
    if mode == "octahedral":
        return Rotation.from_matrix(octa[int(rng.integers(len(octa)))])
    return Rotation.random(rng)


def make_split(spec: DatasetSpec, split: str) -> dict:
    """Generate one split: ``volumes (n, s, s, s)``, ``labels (n,)``, ``rotations (n, 4)``."""
    spec.validate()
    n = spec.counts.get(split, 0)
    mode = spec.rotations.get(split, "none")
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    octa = octahedral_group()
    labels = np.repeat(np.arange(spec.classes), n // spec.classes)
    labels = labels[rng.permutation(n)]
    vols = np.empty((n, spec.size, spec.size, spec.size))
    quats = np.empty((n, 4))
    for i, lab in enumerate(labels):
        pts = motif_points(int(lab), rng, spec.arc_length)
        off = rng.uniform(-spec.shift, spec.shift, size=3)
        vol = rasterize(pts, spec.size, spec.tube_sigma, off)
        R = _rotation(mode, rng, octa)
        if mode == "octahedral":
            vol = _lattice_rotate(vol, R.as_matrix())
        elif mode == "uniform":
            vol = rotate_volume(vol, R.as_matrix())
        vols[i] = vol + spec.noise * rng.standard_normal(vol.shape)
        quats[i] = R.q
    return {"volumes": vols, "labels": labels.astype(np.int64), "rotations": quats}


def _lattice_rotate(vol: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Exact rotation by a signed permutation matrix about the grid center."""
    M = np.rint(M).astype(int)
    # out[p] = vol[M^T p] about the center
    src_axes = [int(np.nonzero(M[i])[0][0]) for i in range(3)]
    out = np.transpose(vol, src_axes)
    for i in range(3):
        if M[i, src_axes[i]] < 0:
            out = np.flip(out, axis=i)
    return np.ascontiguousarray(out)


def make_dataset(spec: DatasetSpec) -> dict:
    return {s: make_split(spec, s) for s in SPLITS if spec.counts.get(s, 0) > 0}


def write_dataset(spec: DatasetSpec, out_dir) -> list:
    """Write one container per split (``train.elpo`` ...) and return the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for split, arrays in make_dataset(spec).items():
        path = os.path.join(out_dir, f"{split}.elpo")
        manifest = {"kind": "dataset", "split": split, "spec": spec.to_dict(), "classes": list(CLASS_NAMES)}
        container.write(path, arrays, manifest)
        paths.append(path)
    return paths


def load_split(path) -> tuple[np.ndarray, np.ndarray, dict]:
    arrays, manifest = container.read(path)
    if "volumes" not in arrays or "labels" not in arrays:
        raise container.ContainerError(f"{path}: not a dataset container")
    return arrays["volumes"], arrays["labels"], manifest or {}
