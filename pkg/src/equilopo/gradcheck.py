"""Central-difference gradient audit for every differentiable operation.

Each registered op builds random inputs and a scalar loss ``sum(op(...) * P)``
with a fixed random projection ``P``; the taped gradient of every input group
is compared to central differences at up to ``max_coords`` sampled entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conv import avg_pool, conv_op, filter_geometry, Se3Filter
from .kernels import n_coeff, product_tensor
from .nonlinear import (
    ActivationConfig,
    activate,
    batch_norm_op,
    gate_op,
    softmax_op,
)
from .signal import degree_weights

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-4


@dataclass
class GradCheckReport:
    op: str
    errors: dict = field(default_factory=dict)
    tol: float = DEFAULT_TOL

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def to_dict(self) -> dict:
        return {"op": self.op, "max_rel_error": self.max_error, "groups": self.errors, "tol": self.tol, "passed": self.passed}


def _signal(rng, shape, L, mean=0.0):
    x = rng.standard_normal(tuple(shape) + (n_coeff(L),))
    x[..., 0] += mean
    return x


def _interior_adaptive(rng, shape, L):
    """Signals in the general branch with ``mu / (3 sigma)`` well inside (-1, 1)."""
    x = _signal(rng, shape, L)
    w = degree_weights(L)
    sigma = np.sqrt(np.sum(w[1:] * x[..., 1:] ** 2, axis=-1))
    x[..., 0] = rng.uniform(-0.6, 0.6, size=shape) * 3.0 * sigma
    return x


# each builder returns (function of tensors -> tensor, list of (name, array))
def _b_identity(rng, s):
    return (lambda x: x * 1.0), [("x", rng.standard_normal((3, 4)))]


def _b_binary(op, pos=False):
    def build(rng, s):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4,))
        if pos:
            b = np.abs(b) + 0.5
        return op, [("a", a), ("b", b)]

    return build


def _b_unary(op, pos=False):
    def build(rng, s):
        a = rng.standard_normal((3, 5))
        if pos:
            a = np.abs(a) + 0.5
        return op, [("a", a)]

    return build


def _b_where(rng, s):
    cond = rng.random((3, 4)) > 0.5
    return (lambda a, b: ad.where(cond, a, b)), [("a", rng.standard_normal((3, 4))), ("b", rng.standard_normal((3, 4)))]


def _b_clip(rng, s):
    a = rng.uniform(-2, 2, (4, 5))
    a[np.abs(np.abs(a) - 1.0) < 0.05] = 0.3  # keep away from the kinks
    return (lambda t: ad.clip(t, -1.0, 1.0)), [("a", a)]


def _b_maximum(rng, s):
    a = rng.uniform(-2, 2, (4, 5))
    a[np.abs(a - 0.2) < 0.05] = 0.7
    return (lambda t: ad.maximum(t, 0.2)), [("a", a)]


def _b_relu(rng, s):
    a = rng.standard_normal((4, 5))
    a[np.abs(a) < 0.05] = 0.5
    return ad.relu, [("a", a)]


def _b_polyval(rng, s):
    return (lambda x: ad.polyval([0.3, -1.2, 0.5], x)), [("x", rng.standard_normal((3, 4)))]


def _b_reduce(rng, s):
    return (lambda x: ad.tsum(x, axis=1) + ad.mean(x, axis=(0, 2), keepdims=False).sum()), [
        ("x", rng.standard_normal((2, 3, 4)))
    ]


def _b_shape(rng, s):
    def f(x):
        y = ad.transpose(ad.reshape(x, (3, 2, 4)), (2, 0, 1))
        z = ad.take_last(y, 1)
        return ad.concat([ad.pad_last(z, 2), y[:, 1:, :]], axis=1)

    return f, [("x", rng.standard_normal((6, 4)))]


def _b_einsum(rng, s):
    return (lambda a, b: ad.einsum("bij,jk->bik", a, b)), [
        ("a", rng.standard_normal((2, 3, 4))),
        ("b", rng.standard_normal((4, 5))),
    ]


def _b_matmul(rng, s):
    return ad.matmul, [("a", rng.standard_normal((3, 4))), ("b", rng.standard_normal((4, 2)))]


def _b_cross_entropy(rng, s):
    labels = rng.integers(0, 3, size=5)
    return (lambda z: ad.cross_entropy(z, labels)), [("logits", rng.standard_normal((5, 3)))]


def _b_cg_product(rng, s):
    L1, L2 = s.get("L1", 1), s.get("L2", 2)
    pt = product_tensor(L1, L2, L1 + L2)
    return (lambda a, b: ad.cg_product(a, b, pt)), [("a", _signal(rng, (3,), L1)), ("b", _signal(rng, (3,), L2))]


def _b_cg_square(rng, s):
    L = s.get("L", 2)
    pt = product_tensor(L, L, 2 * L)
    return (lambda a: ad.cg_square(a, pt)), [("a", _signal(rng, (3,), L))]


def _b_l2(rng, s):
    L = s.get("L", 2)
    w = degree_weights(L)
    return (lambda f: ad.tsum(f * f * w, axis=-1)), [("f", _signal(rng, (4,), L))]


def _b_conv(rng, s):
    L_in, Lf, L_out = s.get("L_in", 1), s.get("L_filter", 1), s.get("L_out", 2)
    ci, co, n = s.get("c_in", 2), s.get("c_out", 2), s.get("size", 3)
    stride, padding = s.get("stride", 1), s.get("padding", "zero")
    geom = filter_geometry(L_in, Lf, L_out)
    init = Se3Filter.random(rng, L_in, Lf, L_out, ci, co)
    keys = sorted(init.weights)
    x = _signal(rng, (1, n, n, n, ci), L_in)

    def f(xt, *ws):
        return conv_op(xt, dict(zip(keys, ws)), geom, ci, co, stride, padding)

    return f, [("x", x)] + [(f"w{l2}_{l4}", init.weights[(l2, l4)]) for l2, l4 in keys]


def _b_conv_strided(rng, s):
    return _b_conv(rng, {"L_in": 2, "L_filter": 2, "L_out": 1, "size": 4, "stride": 2, "padding": "none", **s})


def _b_avg_pool(rng, s):
    return (lambda x: avg_pool(x, 2)), [("x", rng.standard_normal((1, 4, 4, 2, 2, 3)))]


def _b_activation(strategy):
    def build(rng, s):
        L = s.get("L", 1)
        cfg = ActivationConfig(strategy)
        if strategy == "adaptive":
            branch = s.get("branch", "general")
            if branch == "general":
                x = _interior_adaptive(rng, (6,), L)
            else:
                x = _signal(rng, (6,), L) * 0.1
                x[..., 0] = 5.0 if branch == "positive" else -5.0
            return (lambda f: activate(f, L, cfg)), [("f", x)]
        x = _signal(rng, (6,), L)
        if strategy == "trainable":
            return (lambda f, c: activate(f, L, cfg, c)), [("f", x), ("coeffs", np.array(cfg.coeffs))]
        return (lambda f: activate(f, L, cfg)), [("f", x)]

    return build


def _b_softmax(rng, s):
    L = s.get("L", 1)
    cfg = ActivationConfig("adaptive")
    x = _interior_adaptive(rng, (6,), L)
    x[..., 0] = np.abs(x[..., 0]) + 0.3  # positive mean keeps the ratio away from the guard
    return (lambda f: softmax_op(f, L, cfg, False)), [("f", x)]


def _b_softmax_activated(rng, s):
    L = s.get("L", 2)
    cfg = ActivationConfig("adaptive")
    x = _signal(rng, (6,), L)
    x[..., 0] = np.abs(x[..., 0]) + 1.0
    return (lambda f: softmax_op(f, L, cfg, True)), [("f", x)]


def _b_gate(variant):
    def build(rng, s):
        L, c = s.get("L", 1), s.get("channels", 3)
        cfg = ActivationConfig("trainable")
        x = _signal(rng, (2, c), L, mean=0.5)
        params = [("f", x), ("W", rng.standard_normal(c)), ("b", rng.standard_normal(c))]
        if variant == "softmax":
            params.append(("coeffs", np.array(cfg.coeffs)))
            return (lambda f, W, b, k: gate_op(f, L, W, b, variant, cfg, k)), params
        return (lambda f, W, b: gate_op(f, L, W, b, variant, cfg)), params

    return build


def _b_batch_norm(rng, s):
    L, c = s.get("L", 1), s.get("channels", 2)
    x = _signal(rng, (2, 2, 2, 1, c), L)
    return (lambda t, g, b: batch_norm_op(t, L, g, b)[0]), [
        ("x", x),
        ("gamma", rng.uniform(0.5, 1.5, c)),
        ("beta", rng.standard_normal(c)),
    ]


def _b_dropout(rng, s):
    from .nonlinear import dropout_op

    seed = int(rng.integers(1 << 30))
    return (lambda t: dropout_op(t, 0.3, np.random.default_rng(seed))), [("x", _signal(rng, (4, 3), 1))]


def _b_conv3d(rng, s):
    from .network import conv3d_op

    return conv3d_op, [
        ("x", rng.standard_normal((1, 3, 3, 3, 2))),
        ("W", rng.standard_normal((27, 2, 3))),
        ("b", rng.standard_normal(3)),
    ]


REGISTRY = {
    "identity": _b_identity,
    "add": _b_binary(lambda a, b: a + b),
    "sub": _b_binary(lambda a, b: a - b),
    "mul": _b_binary(lambda a, b: a * b),
    "div": _b_binary(lambda a, b: a / b, pos=True),
    "exp": _b_unary(ad.exp),
    "log": _b_unary(ad.log, pos=True),
    "sqrt": _b_unary(ad.sqrt, pos=True),
    "sigmoid": _b_unary(ad.sigmoid),
    "relu": _b_relu,
    "clip": _b_clip,
    "maximum": _b_maximum,
    "where": _b_where,
    "polyval": _b_polyval,
    "reduce": _b_reduce,
    "shape_ops": _b_shape,
    "einsum": _b_einsum,
    "matmul": _b_matmul,
    "cross_entropy": _b_cross_entropy,
    "cg_product": _b_cg_product,
    "cg_square": _b_cg_square,
    "l2_squared": _b_l2,
    "se3_conv": _b_conv,
    "se3_conv_strided": _b_conv_strided,
    "avg_pool": _b_avg_pool,
    "activation_adaptive": _b_activation("adaptive"),
    "activation_constant": _b_activation("constant"),
    "activation_trainable": _b_activation("trainable"),
    "softmax_so3": _b_softmax,
    "softmax_so3_activated": _b_softmax_activated,
    "gate_softmax": _b_gate("softmax"),
    "gate_two_norm": _b_gate("two_norm"),
    "batch_norm": _b_batch_norm,
    "dropout": _b_dropout,
    "conv3d": _b_conv3d,
}


def grad_check(
    op: str,
    sizes: dict | None = None,
    tol: float = DEFAULT_TOL,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    max_coords: int = 40,
) -> GradCheckReport:
    """Compare taped gradients with central differences for a registered op."""
    if op not in REGISTRY:
        raise KeyError(f"unknown op {op!r}; known: {sorted(REGISTRY)}")
    rng = np.random.default_rng(seed)
    fn, inputs = REGISTRY[op](rng, dict(sizes or {}))
    arrays = [np.array(a, dtype=np.float64) for _, a in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    P = rng.standard_normal(out.shape)
    ad.tsum(out * P).backward()

    def value(vals):
        with ad.no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * P))

    report = GradCheckReport(op, tol=tol)
    for gi, (name, _) in enumerate(inputs):
        g = ts[gi].grad if ts[gi].grad is not None else np.zeros_like(arrays[gi])
        flat = arrays[gi].ravel()
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        fd = np.empty(coords.size)
        for j, c in enumerate(coords):
            vals = [a.copy() for a in arrays]
            v = vals[gi].reshape(-1)
            v[c] = flat[c] + step
            up = value(vals)
            v[c] = flat[c] - step
            down = value(vals)
            fd[j] = (up - down) / (2 * step)
        an = g.ravel()[coords]
        scale = max(np.max(np.abs(fd)), np.max(np.abs(an)), 1e-8)
        report.errors[name] = float(np.max(np.abs(fd - an)) / scale)
    return report


def grad_check_all(tol: float = DEFAULT_TOL, seed: int = 0) -> list:
    return [grad_check(op, tol=tol, seed=seed) for op in REGISTRY]
