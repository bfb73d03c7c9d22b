"""EquiLoPO ResNet-style network and a plain 3D CNN baseline.

Two activation modes are supported:

* ``local``: polynomial activations doubling the degree. Initial block
  ``conv(0->2) bn act(2->4) conv(4->1) bn act(1->2)``, basic block
  ``conv(2->1) bn act(1->2) conv(2->1) bn +input[l<=1] act(1->2)``.
* ``global``: gated activations at constant degree. Initial block
  ``conv(0->2) bn gact conv(2->1) bn gact``, basic block
  ``conv(1->1) bn gact conv(1->1) bn +input gact``.

All filters use ``L_filter = 2`` by default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor, as_tensor, grad_enabled
from .conv import SE3Conv, _apply, _apply_vjp, avg_pool, check_degrees
from .kernels import n_coeff
from .nonlinear import (
    STRATEGIES,
    ActivationConfig,
    BatchNormSO3,
    DropoutSO3,
    GlobalActivation,
    LocalActivation,
    softmax_op,
)

__all__ = [
    "Step",
    "BlockSpec",
    "NetworkSpec",
    "initial_block_spec",
    "basic_block_spec",
    "Block",
    "EquiLoPONet",
    "PlainCNN",
]


@dataclass(frozen=True)
class Step:
    kind: str  # conv | bn | act | gact | add
    L_in: int
    L_out: int
    L_filter: int | None = None
    # False lets a conv drop input degrees above L_out + L_filter
    strict: bool = True


@dataclass(frozen=True)
class BlockSpec:
    steps: tuple
    residual: bool = False

    def validate(self, L_start: int) -> None:
        """Check degree chaining and the triangle rule before any compute."""
        L = L_start
        for i, s in enumerate(self.steps):
            if s.L_in != L:
                raise ValueError(f"step {i} ({s.kind}) expects degree {s.L_in}, previous step gives {L}")
            if s.kind == "conv":
                if s.L_filter is None:
                    raise ValueError(f"step {i}: conv needs L_filter")
                check_degrees(s.L_in, s.L_filter, s.L_out, s.strict)
            elif s.kind == "act":
                if s.L_out != 2 * s.L_in:
                    raise ValueError(f"step {i}: local activation maps L to 2L")
            elif s.kind in ("bn", "gact"):
                if s.L_out != s.L_in:
                    raise ValueError(f"step {i}: {s.kind} preserves degree")
            elif s.kind == "add":
                if s.L_out != s.L_in or s.L_in > L_start:
                    raise ValueError(f"step {i}: residual addition cannot raise the degree")
            else:
                raise ValueError(f"step {i}: unknown kind {s.kind!r}")
            L = s.L_out

    def degree_trace(self, L_start: int) -> tuple:
        return (L_start,) + tuple(s.L_out for s in self.steps)

    @property
    def L_in(self) -> int:
        return self.steps[0].L_in

    @property
    def L_out(self) -> int:
        return self.steps[-1].L_out


def initial_block_spec(mode: str = "local", L_filter: int = 2) -> BlockSpec:
    if mode == "local":
        steps = (
            Step("conv", 0, 2, L_filter),
            Step("bn", 2, 2),
            Step("act", 2, 4),
            Step("conv", 4, 1, L_filter, strict=False),
            Step("bn", 1, 1),
            Step("act", 1, 2),
        )
    elif mode == "global":
        steps = (
            Step("conv", 0, 2, L_filter),
            Step("bn", 2, 2),
            Step("gact", 2, 2),
            Step("conv", 2, 1, L_filter),
            Step("bn", 1, 1),
            Step("gact", 1, 1),
        )
    else:
        raise ValueError("mode must be 'local' or 'global'")
    return BlockSpec(steps)


def basic_block_spec(mode: str = "local", L_filter: int = 2) -> BlockSpec:
    if mode == "local":
        steps = (
            Step("conv", 2, 1, L_filter),
            Step("bn", 1, 1),
            Step("act", 1, 2),
            Step("conv", 2, 1, L_filter),
            Step("bn", 1, 1),
            Step("add", 1, 1),
            Step("act", 1, 2),
        )
    elif mode == "global":
        steps = (
            Step("conv", 1, 1, L_filter),
            Step("bn", 1, 1),
            Step("gact", 1, 1),
            Step("conv", 1, 1, L_filter),
            Step("bn", 1, 1),
            Step("add", 1, 1),
            Step("gact", 1, 1),
        )
    else:
        raise ValueError("mode must be 'local' or 'global'")
    return BlockSpec(steps, residual=True)


@dataclass
class NetworkSpec:
    blocks: int = 8
    width: int = 4
    width_schedule: str = "constant"  # constant | double
    mode: str = "local"  # local | global
    activation: str = "trainable"
    gate: str = "softmax"  # softmax | two_norm (global mode)
    classes: int = 3
    dropout: float = 0.01
    L_filter: int = 2
    input_pool: int = 1
    downsample_before: tuple = (2, 4, 6)
    bias: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.width <= 0:
            raise ValueError("width must be positive")
        if self.width_schedule not in ("constant", "double"):
            raise ValueError("width_schedule must be 'constant' or 'double'")
        if self.mode not in ("local", "global"):
            raise ValueError("mode must be 'local' or 'global'")
        if self.activation not in STRATEGIES:
            raise ValueError(f"activation must be one of {STRATEGIES}")
        if self.gate not in ("softmax", "two_norm"):
            raise ValueError("gate must be 'softmax' or 'two_norm'")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.input_pool < 1:
            raise ValueError("input_pool must be >= 1")
        if any(not 0 <= b < self.blocks for b in self.downsample_before):
            raise ValueError("downsample_before entries must be block indices in [0, blocks)")
        initial = initial_block_spec(self.mode, self.L_filter)
        initial.validate(0)
        basic = basic_block_spec(self.mode, self.L_filter)
        basic.validate(initial.L_out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downsample_before"] = list(self.downsample_before)
        return d


class _ChannelMix(Module):
    """Equivariant channel projection for residual paths across a width change."""

    def __init__(self, rng, c_in, c_out):
        self.W = Parameter(rng.standard_normal((c_in, c_out)) / np.sqrt(c_in))

    def __call__(self, x):
        return ad.einsum("...cn,cd->...dn", x, self.W)


class FeatureNorm(Module):
    """Standardize pooled invariant features with running statistics.

    The statistics are updated from each training batch but always enter the
    forward pass as constants, so a sample's score never depends on the other
    samples in its batch and training and inference compute the same function.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = np.zeros(1)

    def __call__(self, f: Tensor) -> Tensor:
        if self.training and grad_enabled() and f.shape[0] > 1:
            mu, var = f.data.mean(axis=0), f.data.var(axis=0)
            if self.initialized[0] == 0.0:
                self.running_mean, self.running_var = mu, var
                self.initialized = np.ones(1)
            else:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1.0 - m) * mu
                self.running_var = m * self.running_var + (1.0 - m) * var
        return (f - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var, "initialized": self.initialized}

    def set_buffer(self, key, value):
        if key not in ("running_mean", "running_var", "initialized"):
            raise KeyError(key)
        setattr(self, key, value)


class Block(Module):
    def __init__(self, spec: BlockSpec, c_in: int, c_out: int, net: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        cfg = ActivationConfig(net.activation)
        self.layers = []
        c = c_in
        for s in spec.steps:
            if s.kind == "conv":
                self.layers.append(SE3Conv(rng, c, c_out, s.L_in, s.L_filter, s.L_out, bias=net.bias, strict=s.strict))
                c = c_out
            elif s.kind == "bn":
                self.layers.append(BatchNormSO3(c, s.L_in))
            elif s.kind == "act":
                self.layers.append(LocalActivation(s.L_in, cfg))
            elif s.kind == "gact":
                self.layers.append(GlobalActivation(c, s.L_in, net.gate, cfg))
            else:
                self.layers.append(None)
        self.dropouts = [
            DropoutSO3(net.dropout, rng) if s.kind in ("act", "gact") else None for s in spec.steps
        ]
        self.shortcut = _ChannelMix(rng, c_in, c_out) if spec.residual and c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        inp = x
        for s, layer, drop in zip(self.spec.steps, self.layers, self.dropouts):
            if s.kind == "add":
                res = ad.take_last(inp, n_coeff(s.L_out)) if inp.shape[-1] != n_coeff(s.L_out) else inp
                if self.shortcut is not None:
                    res = self.shortcut(res)
                x = x + res
            else:
                x = layer(x)
                if drop is not None:
                    x = drop(x)
        return x


class EquiLoPONet(Module):
    def __init__(self, spec: NetworkSpec):
        spec.validate()
        self.net_spec = spec
        rng = np.random.default_rng(spec.seed)
        self.drop_rng = rng
        w = spec.width
        self.initial = Block(initial_block_spec(spec.mode, spec.L_filter), 1, w, spec, rng)
        self.blocks = []
        for i in range(spec.blocks):
            w_in = w
            if i in spec.downsample_before and spec.width_schedule == "double":
                w *= 2
            self.blocks.append(Block(basic_block_spec(spec.mode, spec.L_filter), w_in, w, spec, rng))
        self.out_width = w
        self.L_final = self.initial.spec.L_out
        cfg = ActivationConfig(spec.activation)
        self.pool_cfg = cfg
        # global mode pools pre-activation signals and activates inside the softmax
        self.pool_coeffs = (
            Parameter(np.array(cfg.coeffs)) if spec.mode == "global" and spec.activation == "trainable" else None
        )
        self.head_norm = FeatureNorm(w)
        self.head_W = Parameter(rng.standard_normal((w, spec.classes)) / np.sqrt(w))
        self.head_b = Parameter(np.zeros(spec.classes))

    def features(self, volumes) -> Tensor:
        """Per-channel invariant features ``(B, C)`` before the linear head."""
        x = np.asarray(volumes.data if isinstance(volumes, Tensor) else volumes, dtype=np.float64)
        if x.ndim != 4:
            raise ValueError("input must be a batch of scalar volumes (B, X, Y, Z)")
        t = Tensor(x[..., None, None])
        if self.net_spec.input_pool > 1:
            t = avg_pool(t, self.net_spec.input_pool)
        t = self.initial(t)
        for i, blk in enumerate(self.blocks):
            if i in self.net_spec.downsample_before:
                t = avg_pool(t, 2)
            t = blk(t)
        local = self.net_spec.mode == "local"
        s = softmax_op(t, self.L_final, self.pool_cfg, already_activated=local, coeffs=self.pool_coeffs)
        return ad.mean(s, axis=(1, 2, 3))

    def __call__(self, volumes) -> Tensor:
        return ad.matmul(self.head_norm(self.features(volumes)), self.head_W) + self.head_b

    def n_params(self, identifiable: bool = False) -> int:
        """Stored parameter count, or only parameters that can influence the scores."""
        total = 0
        for name, p in self.named_parameters():
            total += p.data.size
        if not identifiable:
            return total
        for m in self.modules():
            if isinstance(m, SE3Conv):
                total -= m.n_params() - m.n_params(identifiable=True)
        return total

    def conv_params(self) -> int:
        return sum(m.n_params() for m in self.modules() if isinstance(m, SE3Conv))


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def conv3d_op(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Plain zero-padded 3x3x3 convolution; ``x`` is ``(B, X, Y, Z, C)``, ``W`` is ``(27, C_in, C_out)``."""
    x = as_tensor(x)
    S = W.data[:, :, None, :, None]
    xd = x.data[..., None]
    out = _apply(xd, S, 1, "zero")[..., 0] + b.data

    def bw(g):
        gx, gS = _apply_vjp(g[..., None], xd, S, 1, "zero")
        return gx[..., 0], gS[:, :, 0, :, 0], g.sum(axis=(0, 1, 2, 3))

    return ad.make(out, (x, W, b), bw, "conv3d")


class PlainCNN(Module):
    """Ordinary 3D CNN: ``[conv-relu] x2`` stages separated by 2x pooling, flattened linear head.

    The flattened head keeps positional information, so the model can fit
    canonically oriented data but has no built-in rotation invariance.
    """

    def __init__(
        self,
        widths=(16, 30, 56),
        classes: int = 3,
        input_size: int = 16,
        input_pool: int = 2,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.widths, self.classes, self.input_size = tuple(widths), classes, input_size
        self.input_pool, self.seed = input_pool, seed
        self.convs = []
        c = 1
        for w in widths:
            for _ in range(2):
                W = Parameter(rng.standard_normal((27, c, w)) * np.sqrt(2.0 / (27 * c)))
                self.convs.append((W, Parameter(np.zeros(w))))
                c = w
        n = input_size // input_pool
        for _ in range(len(widths) - 1):
            n //= 2
        if n < 1:
            raise ValueError("input too small for the number of stages")
        self.final_size = n
        feat = c * n**3
        self.head_W = Parameter(rng.standard_normal((feat, classes)) / np.sqrt(feat))
        self.head_b = Parameter(np.zeros(classes))

    def config(self) -> dict:
        return {
            "widths": list(self.widths),
            "classes": self.classes,
            "input_size": self.input_size,
            "input_pool": self.input_pool,
            "seed": self.seed,
        }

    def __call__(self, volumes) -> Tensor:
        x = np.asarray(volumes.data if isinstance(volumes, Tensor) else volumes, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (self.input_size,) * 3:
            raise ValueError(f"input must have shape (B, {self.input_size}, {self.input_size}, {self.input_size})")
        t = Tensor(x[..., None])
        if self.input_pool > 1:
            t = avg_pool(t, self.input_pool)
        for i, (W, b) in enumerate(self.convs):
            t = ad.relu(conv3d_op(t, W, b))
            if i % 2 == 1 and i < len(self.convs) - 1:
                t = avg_pool(t, 2)
        feats = ad.reshape(t, (t.shape[0], -1))
        return ad.matmul(feats, self.head_W) + self.head_b

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())
