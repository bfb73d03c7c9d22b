"""Sampling audits of the activation and of the SO(3) softmax pooling.

Both audits evaluate signals at uniformly random rotations and write plain
CSV files; column layouts are fixed by ``ACTIVATION_COLUMNS``,
``HISTOGRAM_COLUMNS`` and ``SOFTMAX_COLUMNS``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .kernels import degree_offset
from .nonlinear import ActivationConfig, local_activation, local_activation_truncated, softmax_so3
from .signal import SO3Signal, evaluate
from .so3_math import Rotation, wigner_flat

ACTIVATION_COLUMNS = ("variant", "x", "y")
HISTOGRAM_COLUMNS = ("variant", "axis", "bin_lo", "bin_hi", "count")
SOFTMAX_COLUMNS = ("signal", "sampled_max", "softmax")

CUTOFF_LEVEL = 0.05
CHUNK = 50_000


def peaked_signal(rng: np.random.Generator, L: int, width: float = 0.1, noise: float = 0.2, shift: float = -0.5):
    """Band-limited bump at a random rotation plus noise, mean shifted by ``shift`` standard deviations.

    Resembles a trained filter response: mostly below zero with a positive peak.
    """
    R0 = Rotation.random(rng)
    c = wigner_flat(L, R0).copy()
    for l in range(L + 1):
        s, n = degree_offset(l), (2 * l + 1) ** 2
        c[s : s + n] *= (2 * l + 1) * np.exp(-l * (l + 1) * width)
    c = c + noise * SO3Signal.random(rng, L).coeffs
    c[0] = 0.0
    # the zero-mean part has standard deviation equal to its 2-norm
    w = np.concatenate([np.full((2 * l + 1) ** 2, 1.0 / (2 * l + 1)) for l in range(L + 1)])
    c[0] = shift * np.sqrt(np.sum(w * c * c))
    return SO3Signal(c, L)


def _eval_chunked(f: SO3Signal, R: Rotation) -> np.ndarray:
    n = R.q.shape[0]
    return np.concatenate([evaluate(f, R[i : i + CHUNK]) for i in range(0, n, CHUNK)])


def cutoff_fraction(x: np.ndarray, y: np.ndarray, level: float = CUTOFF_LEVEL) -> float:
    """Fraction of points with ``x < 0`` and ``|y| > level * max|y|`` (leak past the negative cutoff)."""
    m = np.max(np.abs(y)) if y.size else 0.0
    if m == 0.0:
        return 0.0
    return float(np.mean((x < 0) & (np.abs(y) > level * m)))


@dataclass
class ActivationAudit:
    strategy: str
    L_in: int
    samples: int
    x: np.ndarray
    y_full: np.ndarray
    y_truncated: np.ndarray

    @property
    def fraction_full(self) -> float:
        return cutoff_fraction(self.x, self.y_full)

    @property
    def fraction_truncated(self) -> float:
        return cutoff_fraction(self.x, self.y_truncated)

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "L_in": self.L_in,
            "samples": self.samples,
            "cutoff_level": CUTOFF_LEVEL,
            "fraction_full": self.fraction_full,
            "fraction_truncated": self.fraction_truncated,
        }


def audit_activation(
    strategy: str = "adaptive",
    L_in: int = 2,
    samples: int = 1_000_000,
    seed: int = 0,
    signal: SO3Signal | None = None,
) -> ActivationAudit:
    """Sample one input signal and both activation outputs (``L_out = 2 L_in`` and ``L_out = L_in``)."""
    rng = np.random.default_rng(seed)
    f = peaked_signal(rng, L_in) if signal is None else signal
    if f.coeffs.ndim != 1:
        raise ValueError("audit_activation takes a single signal")
    cfg = ActivationConfig(strategy)
    R = Rotation.random(rng, samples)
    x = _eval_chunked(f, R)
    y_full = _eval_chunked(local_activation(f, cfg), R)
    y_trunc = _eval_chunked(local_activation_truncated(f, cfg), R)
    return ActivationAudit(strategy, f.L, samples, x, y_full, y_trunc)


def _histogram_rows(variant: str, axis: str, values: np.ndarray, bins: int):
    if values.size == 0:
        return []
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return [(variant, axis, lo, hi, values.size)]
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [(variant, axis, edges[i], edges[i + 1], int(counts[i])) for i in range(bins)]


def write_activation_audit(audit: ActivationAudit, out_dir, bins: int = 100) -> dict:
    """Write ``activation_points.csv`` and ``activation_histograms.csv``; identical rows are collapsed."""
    os.makedirs(out_dir, exist_ok=True)
    points = os.path.join(out_dir, "activation_points.csv")
    hist = os.path.join(out_dir, "activation_histograms.csv")
    with open(points, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ACTIVATION_COLUMNS)
        for variant, y in (("full", audit.y_full), ("truncated", audit.y_truncated)):
            pairs = np.stack([audit.x, y], axis=1)
            if np.all(pairs == pairs[0]):
                pairs = pairs[:1]
            for a, b in pairs:
                w.writerow((variant, repr(float(a)), repr(float(b))))
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_COLUMNS)
        for row in _histogram_rows("input", "x", audit.x, bins):
            w.writerow(row)
        for variant, y in (("full", audit.y_full), ("truncated", audit.y_truncated)):
            for row in _histogram_rows(variant, "y", y, bins):
                w.writerow(row)
    return {"points": points, "histograms": hist}


@dataclass
class SoftmaxAudit:
    sampled_max: np.ndarray
    softmax: np.ndarray
    scale: np.ndarray

    def positive_correlation(self) -> float:
        """Pearson correlation over signals whose sampled maximum is positive."""
        m = self.sampled_max > 0
        if m.sum() < 3:
            return float("nan")
        return float(np.corrcoef(self.sampled_max[m], self.softmax[m])[0, 1])

    def negative_max_level(self) -> float:
        """Largest ``|softmax| / ||f||_2`` over signals whose sampled maximum is negative."""
        m = self.sampled_max < 0
        if not m.any():
            return 0.0
        return float(np.max(np.abs(self.softmax[m]) / self.scale[m]))

    def summary(self) -> dict:
        return {
            "signals": int(self.sampled_max.size),
            "positive": int(np.sum(self.sampled_max > 0)),
            "pearson_positive": self.positive_correlation(),
            "negative_max_level": self.negative_max_level(),
        }


def audit_softmax(
    signals: int = 1000,
    L: int = 1,
    rotations: int = 1_000_000,
    seed: int = 0,
    batch: SO3Signal | None = None,
) -> SoftmaxAudit:
    """Compare the pooled softmax with the maximum over sampled rotations.

    Signals default to Gaussian random coefficients of degree ``L``.
    """
    rng = np.random.default_rng(seed)
    f = SO3Signal.random(rng, L, (signals,)) if batch is None else batch
    if f.coeffs.ndim != 2:
        raise ValueError("audit_softmax takes a batch of signals (n, n_coeff)")
    R = Rotation.random(rng, rotations)
    smax = np.full(f.coeffs.shape[0], -np.inf)
    for i in range(0, rotations, CHUNK):
        smax = np.maximum(smax, evaluate(f, R[i : i + CHUNK]).max(axis=0))
    sm = softmax_so3(f)
    w = np.concatenate([np.full((2 * l + 1) ** 2, 1.0 / (2 * l + 1)) for l in range(f.L + 1)])
    scale = np.sqrt(np.sum(w * f.coeffs**2, axis=-1))
    return SoftmaxAudit(smax, np.asarray(sm, dtype=np.float64), scale)


def write_softmax_audit(audit: SoftmaxAudit, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "softmax_points.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SOFTMAX_COLUMNS)
        for i, (a, b) in enumerate(zip(audit.sampled_max, audit.softmax)):
            w.writerow((i, repr(float(a)), repr(float(b))))
    return path
