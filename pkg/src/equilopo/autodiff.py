"""Minimal reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` produced by an op records its parents and a closure
mapping the output gradient to one gradient per parent. :meth:`Tensor.backward`
walks the graph once in reverse topological order, accumulating gradients
additively at fan-out.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_GRAD = {"enabled": True}


@contextlib.contextmanager
def no_grad():
    prev = _GRAD["enabled"]
    _GRAD["enabled"] = False
    try:
        yield
    finally:
        _GRAD["enabled"] = prev


def grad_enabled() -> bool:
    return _GRAD["enabled"]


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if not self.requires_grad:
            raise TapeError("backward() on a tensor that is not part of a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise TapeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A leaf tensor that always records gradients."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def _topo_order(root: Tensor) -> list:
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor, floor: float = 0.0) -> Tensor:
    """Square root; the gradient is taken as 0 where the argument is ``<= floor``."""
    out = np.sqrt(np.maximum(a.data, 0.0))
    safe = np.where(a.data > floor, out, 1.0)

    def bw(g):
        return (np.where(a.data > floor, g * 0.5 / safe, 0.0),)

    return make(out, (a,), bw, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def maximum(a: Tensor, floor: float) -> Tensor:
    keep = a.data > floor
    return make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where",
    )


def polyval(coeffs: Sequence[float], x: Tensor) -> Tensor:
    """Evaluate ``sum_i coeffs[i] * x**i`` (constant coefficients)."""
    c = np.asarray(coeffs, dtype=np.float64)
    val = np.polynomial.polynomial.polyval(x.data, c)
    dc = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)
    return make(val, (x,), lambda g: (g * np.polynomial.polynomial.polyval(x.data, dc),), "polyval")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make(a.data[idx], (a,), bw, "getitem")


def take_last(a: Tensor, stop: int) -> Tensor:
    """``a[..., :stop]`` with a cheap backward (contiguous slice)."""

    def bw(g):
        out = np.zeros_like(a.data)
        out[..., :stop] = g
        return (out,)

    return make(a.data[..., :stop], (a,), bw, "take_last")


def pad_last(a: Tensor, size: int) -> Tensor:
    """Zero-extend the last axis to ``size``."""
    n = a.shape[-1]
    out = np.zeros(a.shape[:-1] + (size,))
    out[..., :n] = a.data
    return make(out, (a,), lambda g: (g[..., :n],), "pad_last")


def concat(items: Sequence[Tensor], axis: int) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    return make(
        np.concatenate([t.data for t in items], axis=axis),
        items,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def bw(g):
        ga = _einsum_grad(g, out_s, b.data, sb, sa, a.shape) if a.requires_grad else None
        gb = _einsum_grad(g, out_s, a.data, sa, sb, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw, "einsum")


def _einsum_grad(g, so, other, s_other, s_target, shape):
    # target indices absent from both g and the other operand were summed
    # out in the forward pass; their gradient is a broadcast
    present = set(so) | set(s_other)
    reduced = "".join(c for c in s_target if c in present)
    r = np.einsum(f"{so},{s_other}->{reduced}", g, other, optimize=True)
    if len(reduced) == len(s_target):
        return r
    for i, c in enumerate(s_target):
        if c not in present:
            r = np.expand_dims(r, axis=i)
    return np.broadcast_to(r, shape).copy()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class ids."""
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    n = z.shape[0]
    loss = np.mean(lse - z[np.arange(n), labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make(loss, (logits,), bw, "cross_entropy")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# SO(3) coefficient product
# ---------------------------------------------------------------------------


def cg_product(a: Tensor, b: Tensor, pt: kernels.ProductTensor) -> Tensor:
    """Pointwise product of two signal batches in coefficient space.

    Both operand VJPs are CG contractions of the output gradient with the
    other operand.
    """
    a, b = as_tensor(a), as_tensor(b)
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    ad = np.broadcast_to(a.data, lead + (pt.na,))
    bd = np.broadcast_to(b.data, lead + (pt.nb,))
    out = kernels.cg_product(ad, bd, pt)

    def bw(g):
        ga, gb = kernels.cg_product_vjp(g, ad, bd, pt)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make(out, (a, b), bw, "cg_product")


def cg_square(a: Tensor, pt: kernels.ProductTensor) -> Tensor:
    """``cg_product(a, a, pt)`` using the symmetric half of the product tensor."""
    a = as_tensor(a)
    out = kernels.cg_square(a.data, pt)

    def bw(g):
        return (kernels.cg_square_vjp(g, a.data, pt),)

    return make(out, (a,), bw, "cg_square")


# ---------------------------------------------------------------------------
# modules and optimizer
# ---------------------------------------------------------------------------


class Module:
    """Parameter container; submodules and parameters are discovered by attribute."""

    training: bool = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _named(value, prefix + name)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            for m in _submodules(value):
                yield from m.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for mname, m in self._named_modules():
            for key, arr in m.buffers().items():
                out[f"{mname}{key}"] = arr.copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for mname, m in self._named_modules():
            for key in m.buffers():
                full = f"{mname}{key}"
                if full in state:
                    m.set_buffer(key, np.array(state[full], dtype=np.float64))

    def buffers(self) -> dict:
        """Non-trainable state (e.g. running statistics); override where needed."""
        return {}

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        raise KeyError(key)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v._named_modules(f"{prefix}{name}.{i}.")


def _named(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _named(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _named(value[k], f"{name}.{k}")


def _submodules(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _submodules(v)


class Adam:
    def __init__(self, params, lr: float = 0.005, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr >= 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or self.lr == 0.0:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
