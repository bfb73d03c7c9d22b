"""Coefficient-space nonlinearities for SO(3) signals.

All ops act on the trailing coefficient axis and are taped for autodiff.
The :class:`~equilopo.signal.SO3Signal` wrappers at the bottom run the same
code without recording a graph.

Local activation replaces ``f(R)`` by ``D * P2(f(R) / D)`` with
``P2(x) = c0 + c1 x + c2 x^2``. In coefficient space this is

    c0 D e0 + c1 f + (c2 / D) f*f

where ``f*f`` is the CG product, so the output degree is ``2L``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor, as_tensor
from .kernels import n_coeff, product_tensor
from .signal import SO3Signal, degree_weights, max_degree, truncate

__all__ = [
    "CONSTANT_COEFFS",
    "STRATEGIES",
    "ActivationConfig",
    "adaptive_coefficients",
    "fit_error",
    "fit_quality",
    "fit_quality_closed_form",
    "local_activation",
    "local_activation_truncated",
    "softmax_so3",
    "global_activation",
    "batch_norm_so3",
    "dropout_so3",
    "LocalActivation",
    "GlobalActivation",
    "BatchNormSO3",
    "DropoutSO3",
]

CONSTANT_COEFFS = (3.0 / 32.0, 0.5, 15.0 / 32.0)
STRATEGIES = ("adaptive", "constant", "trainable")
LEAK = 0.01
SOFTMAX_EPS = 1e-8
BN_EPS = 1e-5

# coefficient polynomials in k, lowest power first
_C0 = np.array([3, 0, 9, 0, -27, 0, 15]) / 32.0
_C1 = np.array([8, -3, 0, 26, 0, -15]) / 16.0
_C2 = np.array([15, 0, -30, 0, 15]) / 32.0


@dataclass(frozen=True)
class ActivationConfig:
    strategy: str = "constant"
    coeffs: tuple = CONSTANT_COEFFS
    leak: float = LEAK

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown activation strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "constant" and tuple(self.coeffs) != CONSTANT_COEFFS:
            raise ValueError("the constant strategy uses the fixed coefficients (3/32, 1/2, 15/32)")


# ---------------------------------------------------------------------------
# polynomial fit of ReLU
# ---------------------------------------------------------------------------


def adaptive_coefficients(k):
    """``(c0, c1, c2)`` minimizing the ReLU fit error on ``[-1 + k, 1 + k]``."""
    k = np.asarray(k, dtype=np.float64)
    if np.any(np.abs(k) > 1.0):
        raise ValueError("k must lie in [-1, 1]")
    pv = np.polynomial.polynomial.polyval
    c0, c1, c2 = pv(k, _C0), pv(k, _C1), pv(k, _C2)
    if k.ndim == 0:
        return float(c0), float(c1), float(c2)
    return c0, c1, c2


def fit_error(c0: float, c1: float, c2: float, k: float) -> float:
    """``int_{-1+k}^0 P^2 dx + int_0^{1+k} (P - x)^2 dx`` by adaptive quadrature."""

    def p(x):
        return c0 + c1 * x + c2 * x * x

    lo, _ = integrate.quad(lambda x: p(x) ** 2, -1.0 + k, 0.0, epsabs=1e-14, epsrel=1e-13)
    hi, _ = integrate.quad(lambda x: (p(x) - x) ** 2, 0.0, 1.0 + k, epsabs=1e-14, epsrel=1e-13)
    return lo + hi


def fit_quality_closed_form(k):
    """Minimal fit error as a polynomial in ``k``."""
    k = np.asarray(k, dtype=np.float64)
    return -5 * k**8 / 128 + 11 * k**6 / 96 - 7 * k**4 / 64 + k**2 / 32 + 1.0 / 384


def fit_quality(k: float) -> tuple[float, float]:
    """Fit error at the adaptive coefficients: ``(closed form, numerical integral)``."""
    return float(fit_quality_closed_form(k)), fit_error(*adaptive_coefficients(k), k)


# ---------------------------------------------------------------------------
# taped ops on coefficient arrays (..., n_coeff(L))
# ---------------------------------------------------------------------------


def _weights(L: int) -> np.ndarray:
    return np.asarray(degree_weights(L))


def _sq_norm(f: Tensor, L: int, skip_mean: bool = False) -> Tensor:
    w = _weights(L)
    if skip_mean:
        w = w.copy()
        w[0] = 0.0
    return ad.tsum(f * f * w, axis=-1)


def _square(f: Tensor, L: int) -> Tensor:
    return ad.cg_square(f, product_tensor(L, L, 2 * L))


def _scalar_to_e0(s: Tensor, n: int) -> Tensor:
    return ad.pad_last(ad.reshape(s, s.shape + (1,)), n)


def activate(f: Tensor, L: int, cfg: ActivationConfig, coeffs: Tensor | None = None) -> Tensor:
    """Local polynomial activation, degree ``L -> 2L``.

    ``coeffs`` overrides ``cfg.coeffs`` for the trainable strategy (a length-3
    tensor broadcast over all signals).
    """
    f = as_tensor(f)
    n2 = n_coeff(2 * L)
    fp = ad.pad_last(f, n2)
    sq = _square(f, L)
    if cfg.strategy == "adaptive":
        mu = f[..., 0]
        sigma = ad.sqrt(_sq_norm(f, L, skip_mean=True))
        neg = mu.data + 3.0 * sigma.data <= 0.0
        pos = mu.data - 3.0 * sigma.data > 0.0
        gen = ~(neg | pos)
        D = ad.where(gen, 3.0 * sigma, 1.0)
        k = ad.clip(mu / D, -1.0, 1.0)
        c0, c1, c2 = ad.polyval(_C0, k), ad.polyval(_C1, k), ad.polyval(_C2, k)
        exp_ = lambda t: ad.reshape(t, t.shape + (1,))  # noqa: E731
        general = _scalar_to_e0(c0 * D, n2) + exp_(c1) * fp + exp_(c2 / D) * sq
        branch = np.where(neg, cfg.leak, 1.0)[..., None]
        return ad.where(gen[..., None], general, fp * branch)
    if coeffs is None:
        coeffs = Tensor(np.asarray(cfg.coeffs, dtype=np.float64))
    D = ad.maximum(ad.sqrt(_sq_norm(f, L)) / 3.0, 1e-300)
    c0, c1, c2 = coeffs[0], coeffs[1], coeffs[2]
    Dn = ad.reshape(D, D.shape + (1,))
    return _scalar_to_e0(c0 * D, n2) + c1 * fp + (c2 / Dn) * sq


def softmax_ratio(fa: Tensor, L: int) -> Tensor:
    """``||f_a||_2^2 / f_a^0``; zero where ``|f_a^0| <= eps``."""
    num = _sq_norm(fa, L)
    den = fa[..., 0]
    guard = np.abs(den.data) <= SOFTMAX_EPS
    safe = ad.where(guard, 1.0, den)
    return ad.where(guard, 0.0, num / safe)


def softmax_op(f: Tensor, L: int, cfg: ActivationConfig, already_activated: bool, coeffs=None) -> Tensor:
    if already_activated:
        return softmax_ratio(as_tensor(f), L)
    return softmax_ratio(activate(f, L, cfg, coeffs), 2 * L)


def gate_op(f: Tensor, L: int, W: Tensor, b: Tensor, variant: str, cfg: ActivationConfig, coeffs=None) -> Tensor:
    """``sigmoid(W g(f) + b) * f`` with ``g`` the SO(3) softmax or the 2-norm."""
    if variant == "softmax":
        g = softmax_op(f, L, cfg, False, coeffs)
    elif variant == "two_norm":
        g = ad.sqrt(_sq_norm(f, L))
    else:
        raise ValueError("variant must be 'softmax' or 'two_norm'")
    gate = ad.sigmoid(W * g + b)
    return ad.reshape(gate, gate.shape + (1,)) * f


def batch_norm_op(x: Tensor, L: int, gamma: Tensor, beta: Tensor, stats=None):
    """Normalize ``(B, X, Y, Z, C, N)``; returns ``(out, (mu, var))`` with the statistics used.

    ``stats`` fixes ``(mu, var)`` per channel (eval mode); otherwise they are
    taken over batch and voxels.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 2))
    if stats is None:
        mu = ad.mean(x[..., 0], axis=axes)
        var = ad.mean(_sq_norm(x, L, skip_mean=True), axis=axes)
    else:
        mu, var = Tensor(stats[0]), Tensor(stats[1])
    sigma = ad.maximum(ad.sqrt(var), BN_EPS)
    scale = gamma / sigma
    n = x.shape[-1]
    shift = _scalar_to_e0(beta - scale * mu, n)
    out = x * ad.reshape(scale, scale.shape + (1,)) + shift
    return out, (mu.data, var.data)


def dropout_op(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Zero whole signals with probability ``rate``; survivors scaled by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return x
    keep = rng.random(x.shape[:-1]) >= rate
    return x * (keep / (1.0 - rate))[..., None]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class LocalActivation(Module):
    def __init__(self, L_in: int, cfg: ActivationConfig):
        self.L_in = L_in
        self.cfg = cfg
        self.coeffs = Parameter(np.array(cfg.coeffs)) if cfg.strategy == "trainable" else None

    def __call__(self, x: Tensor) -> Tensor:
        return activate(x, self.L_in, self.cfg, self.coeffs)


class GlobalActivation(Module):
    """Per-channel gate; the input channel axis is second to last."""

    def __init__(self, channels: int, L: int, variant: str, cfg: ActivationConfig):
        if variant not in ("softmax", "two_norm"):
            raise ValueError("variant must be 'softmax' or 'two_norm'")
        self.L = L
        self.variant = variant
        self.cfg = cfg
        self.W = Parameter(np.ones(channels))
        self.b = Parameter(np.zeros(channels))
        self.coeffs = Parameter(np.array(cfg.coeffs)) if cfg.strategy == "trainable" and variant == "softmax" else None

    def __call__(self, x: Tensor) -> Tensor:
        return gate_op(x, self.L, self.W, self.b, self.variant, self.cfg, self.coeffs)


class BatchNormSO3(Module):
    def __init__(self, channels: int, L: int, momentum: float = 0.9):
        self.L = L
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            out, (mu, var) = batch_norm_op(x, self.L, self.gamma, self.beta)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu
            self.running_var = m * self.running_var + (1.0 - m) * var
            return out
        out, _ = batch_norm_op(x, self.L, self.gamma, self.beta, (self.running_mean, self.running_var))
        return out

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, key, value):
        if key not in ("running_mean", "running_var"):
            raise KeyError(key)
        setattr(self, key, value)


class DropoutSO3(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        return dropout_op(x, self.rate, self.rng)


# ---------------------------------------------------------------------------
# SO3Signal-level API
# ---------------------------------------------------------------------------

# signal-level default: the branch rules make constants map exactly
ADAPTIVE = ActivationConfig("adaptive")


def local_activation(f: SO3Signal, cfg: ActivationConfig = ADAPTIVE) -> SO3Signal:
    """Pointwise ``D P2(f / D)``; output degree ``2 L``."""
    with ad.no_grad():
        out = activate(Tensor(f.coeffs), f.L, cfg)
    return SO3Signal(out.data, 2 * f.L)


def local_activation_truncated(f: SO3Signal, cfg: ActivationConfig = ADAPTIVE) -> SO3Signal:
    """Low-resolution variant: activation truncated back to degree ``L`` (ablation only)."""
    return truncate(local_activation(f, cfg), f.L)


def softmax_so3(f: SO3Signal, already_activated: bool = False, cfg: ActivationConfig = ADAPTIVE):
    """Smooth maximum of ``f`` over SO(3): ``||act f||_2^2 / ||act f||_1``."""
    with ad.no_grad():
        out = softmax_op(Tensor(f.coeffs), f.L, cfg, already_activated)
    return out.data[()] if out.data.ndim == 0 else out.data


def global_activation(
    f: SO3Signal, W: float, b: float, variant: str = "softmax", cfg: ActivationConfig = ADAPTIVE
) -> SO3Signal:
    with ad.no_grad():
        out = gate_op(Tensor(f.coeffs), f.L, Tensor(W), Tensor(b), variant, cfg)
    return SO3Signal(out.data, f.L)


def batch_norm_so3(fields, gamma, beta, mode: str = "train", running=None):
    """Normalize a batch of fields ``(B, X, Y, Z, C, N)``.

    ``mode='eval'`` requires ``running = (mean, var)``. Returns
    ``(normalized, (batch mean, batch var))``.
    """
    fields = np.asarray(fields, dtype=np.float64)
    L = max_degree(fields.shape[-1])
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "eval" and running is None:
        raise ValueError("eval mode needs running statistics")
    with ad.no_grad():
        out, stats = batch_norm_op(
            Tensor(fields), L, Tensor(np.asarray(gamma, float)), Tensor(np.asarray(beta, float)),
            None if mode == "train" else running,
        )
    return out.data, stats


def dropout_so3(field: np.ndarray, rate: float, mode: str = "train", rng: np.random.Generator | None = None):
    if mode == "eval" or rate == 0.0:
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        return np.asarray(field)
    rng = np.random.default_rng() if rng is None else rng
    with ad.no_grad():
        return dropout_op(Tensor(field), rate, rng).data


def sampled_max(f: SO3Signal, rotations) -> np.ndarray:
    """Maximum of ``f`` over a set of sample rotations (audit helper)."""
    from .signal import evaluate

    return evaluate(f, rotations).max(axis=0)
