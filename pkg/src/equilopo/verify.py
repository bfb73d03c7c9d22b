"""Self-checks of the mathematical invariants, grouped by scope.

Each scope returns a list of :class:`Check` records; a check passes when its
measured ``value`` is within ``tol`` (or, for negative controls, when the
broken variant is detectably wrong).
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .conv import Se3Filter, convolve, rotate_field, rotate_filter
from .nonlinear import (
    CONSTANT_COEFFS,
    adaptive_coefficients,
    fit_error,
    local_activation,
    local_activation_truncated,
    softmax_so3,
)
from .oracles import conv_center
from .signal import SO3Signal, evaluate, product, stats
from .so3_math import (
    CGTable,
    Rotation,
    octahedral_group,
    real_spherical_harmonics,
    s2_quadrature,
    so3_quadrature,
    wigner_flat,
    wigner_matrix,
)

SCOPES = ("math", "signal", "conv", "nonlinear", "network")


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _le(name: str, value: float, tol: float, detail: str = "") -> Check:
    value = float(value)
    return Check(name, bool(np.isfinite(value) and value <= tol), value, tol, detail)


def _ge(name: str, value: float, tol: float, detail: str = "") -> Check:
    value = float(value)
    return Check(name, bool(np.isfinite(value) and value >= tol), value, tol, detail)


# ---------------------------------------------------------------------------
# math
# ---------------------------------------------------------------------------


def load_cg_table(path, L_max: int = 4) -> CGTable:
    """Read a CG cache container; build and write it if the file does not exist."""
    if not os.path.exists(path):
        table = CGTable.build(L_max)
        container.write(path, table.to_arrays(), {"kind": "cg_table", "L_max": L_max})
        return table
    arrays, manifest = container.read(path)
    if not manifest or manifest.get("kind") != "cg_table":
        raise container.ContainerError(f"{path}: not a CG table container")
    return CGTable.from_arrays(arrays)


def cg_orthogonality_error(table: CGTable, L: int) -> float:
    """Largest deviation of ``sum_{k1 k2} C C'`` from the identity over all ``l1, l2 <= L``."""
    err = 0.0
    for l1 in range(L + 1):
        for l2 in range(L + 1):
            rows = []
            for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                blk = table.blocks.get((l1, l2, l3))
                if blk is None:
                    return float("inf")
                rows.append(np.asarray(blk).reshape(2 * l3 + 1, -1))
            M = np.concatenate(rows)
            err = max(err, np.abs(M @ M.T - np.eye(M.shape[0])).max())
    return err


def cg_triple_d_error(table: CGTable, L: int = 2) -> float:
    """``int D^l1 D^l2 D^l3 = <l3 a3|l1 a1 l2 a2><l3 b3|l1 b1 l2 b2> / (2 l3 + 1)`` on a quadrature grid."""
    q = so3_quadrature(3 * L)
    Rs = q.rotations
    D = [np.stack([wigner_matrix(l, Rs[i]) for i in range(len(Rs))]) for l in range(L + 1)]
    err = 0.0
    for l1 in range(L + 1):
        for l2 in range(L + 1):
            for l3 in range(abs(l1 - l2), min(l1 + l2, L) + 1):
                lhs = np.einsum("n,nab,ncd,nef->acebdf", q.weights, D[l1], D[l2], D[l3])
                C = table.blocks[(l1, l2, l3)]
                rhs = np.einsum("eac,fbd->acebdf", C, C) / (2 * l3 + 1)
                err = max(err, np.abs(lhs - rhs).max())
    return err


def check_math(seed: int = 0, cg_cache=None, L: int = 4) -> list:
    rng = np.random.default_rng(seed)
    out = []
    R1, R2 = Rotation.random(rng, 20), Rotation.random(rng, 20)
    R12 = R1 @ R2
    Ri = R1.inverse()
    ortho = homo = inv = 0.0
    for i in range(20):
        for l in range(L + 1):
            d1, d2 = wigner_matrix(l, R1[i]), wigner_matrix(l, R2[i])
            ortho = max(ortho, np.abs(d1.T @ d1 - np.eye(2 * l + 1)).max())
            homo = max(homo, np.abs(wigner_matrix(l, R12[i]) - d1 @ d2).max())
            inv = max(inv, np.abs(wigner_matrix(l, Ri[i]) - d1.T).max())
    out.append(_le("wigner_orthogonality", ortho, 1e-9))
    out.append(_le("wigner_homomorphism", homo, 1e-9))
    out.append(_le("wigner_inverse_transpose", inv, 1e-9))

    q = so3_quadrature(L)
    d = wigner_flat(L, q.rotations)
    deg = np.concatenate([np.full((2 * l + 1) ** 2, 2 * l + 1.0) for l in range(L + 1)])
    gram = (d * q.weights[:, None]).T @ d * deg[:, None]
    out.append(_le("wigner_quadrature_orthogonality", np.abs(gram - np.eye(d.shape[1])).max(), 1e-9))

    R = Rotation.random(rng)
    m = R.as_matrix()
    pts = rng.standard_normal((100, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    lhs = real_spherical_harmonics(2, pts @ m.T)[:, 4:9]
    rhs = real_spherical_harmonics(2, pts)[:, 4:9] @ wigner_matrix(2, R).T
    out.append(_le("harmonics_rotation", np.abs(lhs - rhs).max(), 1e-10))

    xyz, w = s2_quadrature(6)
    Y = real_spherical_harmonics(6, xyz)
    out.append(_le("harmonics_orthonormality", np.abs((Y * w[:, None]).T @ Y - np.eye(Y.shape[1])).max(), 1e-10))

    qn = np.abs(np.linalg.norm(R12.q, axis=1) - 1.0).max()
    ident = (R1 @ Ri).q
    out.append(_le("quaternion_norm", qn, 1e-12))
    out.append(_le("compose_inverse_identity", np.abs(ident - np.array([1.0, 0, 0, 0])).max(), 1e-12))

    detail = ""
    try:
        table = CGTable.build(L) if cg_cache is None else load_cg_table(cg_cache, L)
        if cg_cache is not None:
            detail = f"table from {cg_cache}"
        cg_err = cg_orthogonality_error(table, L)
        tri = cg_triple_d_error(table, 2) if all((l1, l2, l3) in table.blocks for l1 in range(3)
                                                 for l2 in range(3) for l3 in range(abs(l1 - l2), l1 + l2 + 1)) else np.inf
    except (container.ContainerError, KeyError, ValueError) as exc:
        cg_err = tri = float("inf")
        detail = str(exc)
    out.append(_le("cg_orthogonality", cg_err, 1e-9, detail))
    out.append(_le("cg_triple_wigner", tri, 1e-9, detail))
    return out


# ---------------------------------------------------------------------------
# signal
# ---------------------------------------------------------------------------


def check_signal(seed: int = 0, L_max: int = 3, rotations: int = 500) -> list:
    rng = np.random.default_rng(seed)
    R = Rotation.random(rng, rotations)
    err = 0.0
    trunc = np.inf
    for L1 in range(L_max + 1):
        for L2 in range(L1, L_max + 1):
            f1, f2 = SO3Signal.random(rng, L1), SO3Signal.random(rng, L2)
            direct = evaluate(f1, R) * evaluate(f2, R)
            scale = max(1.0, np.abs(direct).max())
            err = max(err, np.abs(evaluate(product(f1, f2), R) - direct).max() / scale)
            if L1 >= 1:
                t = product(f1, f2, L_out=max(L1, L2))
                trunc = min(trunc, np.abs(evaluate(t, R) - direct).max() / scale)
    return [
        _le("product_pointwise", err, 1e-9),
        # negative control: truncating the product must visibly break the identity
        _ge("product_truncated_breaks", trunc, 1e-3),
    ]


# ---------------------------------------------------------------------------
# conv
# ---------------------------------------------------------------------------

FIDELITY_CASES = ((0, 2, 2), (1, 1, 2), (2, 2, 1))


def check_conv(seed: int = 0, filter_rotations: int = 50) -> list:
    rng = np.random.default_rng(seed)
    from .kernels import n_coeff

    out = []
    fid = 0.0
    for L_in, Lf, L_out in FIDELITY_CASES:
        filt = Se3Filter.random(rng, L_in, Lf, L_out, strict=False)
        f = rng.standard_normal((3, 3, 3, n_coeff(L_in)))
        got = convolve(f[None, ..., None, :], filt)[0, 1, 1, 1, 0]
        ref = conv_center(f, filt)
        fid = max(fid, np.abs(got - ref).max() / max(1.0, np.abs(ref).max()))
    out.append(_le("conv_quadrature_fidelity", fid, 1e-8))

    filt = Se3Filter.random(rng, 1, 1, 2, c_in=2, c_out=2)
    x = rng.standard_normal((1, 5, 5, 5, 2, n_coeff(1)))
    y = convolve(x, filt)
    oct_err = 0.0
    for m in octahedral_group():
        R = Rotation.from_matrix(m)
        lhs = convolve(rotate_field(x, R), filt)
        rhs = rotate_field(y, R)
        oct_err = max(oct_err, np.abs(lhs - rhs).max() / np.abs(rhs).max())
    out.append(_le("conv_octahedral_equivariance", oct_err, 1e-6))

    from .signal import rotate_coeffs

    rot_err = 0.0
    Rs = Rotation.random(rng, filter_rotations)
    for i in range(filter_rotations):
        lhs = convolve(x, rotate_filter(filt, Rs[i]))
        rhs = rotate_coeffs(y, 2, Rs[i], "right")
        rot_err = max(rot_err, np.abs(lhs - rhs).max() / np.abs(rhs).max())
    out.append(_le("conv_filter_rotation_equivariance", rot_err, 1e-6))
    return out


# ---------------------------------------------------------------------------
# nonlinear
# ---------------------------------------------------------------------------


def _pointwise_activation(f: SO3Signal, values: np.ndarray) -> np.ndarray:
    """Reference ``D P2(x / D)`` evaluated on sampled values ``x`` (general branch)."""
    st = stats(f)
    D = 3.0 * st.std
    c0, c1, c2 = adaptive_coefficients(np.clip(st.mean / D, -1.0, 1.0))
    t = values / D
    return D * (c0 + c1 * t + c2 * t * t)


def fit_gradient(k: float, h: float = 1e-5) -> float:
    """Largest central-difference partial derivative of the fit error at the adaptive coefficients."""
    c = np.array(adaptive_coefficients(k))
    g = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g = max(g, abs(fit_error(*(c + e), k) - fit_error(*(c - e), k)) / (2 * h))
    return g


def check_nonlinear(seed: int = 0, rotations: int = 1000) -> list:
    rng = np.random.default_rng(seed)
    out = []
    c = adaptive_coefficients(0.0)
    out.append(Check("adaptive_coefficients_k0", c == CONSTANT_COEFFS, float(np.abs(np.subtract(c, CONSTANT_COEFFS)).max()), 0.0))

    ks = np.linspace(-1.0, 1.0, 21)
    out.append(_le("fit_optimality", max(fit_gradient(k) for k in ks), 1e-6))
    gap = max(fit_error(*adaptive_coefficients(k), k) - fit_error(*CONSTANT_COEFFS, k) for k in ks)
    out.append(_le("adaptive_not_worse", gap, 1e-12))
    ratio = min(fit_error(*CONSTANT_COEFFS, k) / fit_error(*adaptive_coefficients(k), k) for k in (-0.5, 0.5))
    out.append(_ge("adaptive_twofold_at_half", ratio, 2.0))

    R = Rotation.random(rng, rotations)
    err, broken = 0.0, np.inf
    for L in (1, 2):
        for _ in range(3):
            f = SO3Signal.random(rng, L)
            f.coeffs[0] = 0.3 * rng.standard_normal()
            x = evaluate(f, R)
            ref = _pointwise_activation(f, x)
            scale = max(1.0, np.abs(ref).max())
            err = max(err, np.abs(evaluate(local_activation(f), R) - ref).max() / scale)
            broken = min(broken, np.abs(evaluate(local_activation_truncated(f), R) - ref).max() / scale)
    out.append(_le("activation_pointwise", err, 1e-9))
    out.append(_ge("activation_truncated_breaks", broken, 1e-3))

    sm_err = 0.0
    for L in (1, 2):
        q = so3_quadrature(2 * L)
        for _ in range(3):
            f = SO3Signal.random(rng, L)
            f.coeffs[0] = 0.3 * rng.standard_normal()
            a = _pointwise_activation(f, evaluate(f, q.rotations))
            ref = q.integrate(a * a) / q.integrate(a)
            sm_err = max(sm_err, abs(softmax_so3(f) - ref) / max(1.0, abs(ref)))
    out.append(_le("softmax_quadrature", sm_err, 1e-6))
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def check_network(seed: int = 0, size: int = 8) -> list:
    from . import autodiff as ad
    from .network import EquiLoPONet, NetworkSpec

    rng = np.random.default_rng(seed)
    out = []
    for mode in ("local", "global"):
        net = EquiLoPONet(NetworkSpec(blocks=1, width=2, mode=mode, activation="adaptive",
                                      downsample_before=(0,), seed=seed))
        x = rng.standard_normal((2, size, size, size))
        # one training pass so normalization buffers hold non-trivial statistics
        with ad.no_grad():
            net(x)
        net.eval()
        with ad.no_grad():
            ref = net(x).data
            err = 0.0
            for m in octahedral_group():
                xr = rotate_field(x, Rotation.from_matrix(m))
                err = max(err, np.abs(net(xr).data - ref).max() / np.abs(ref).max())
        out.append(_le(f"network_octahedral_invariance_{mode}", err, 1e-5))
    return out


RUNNERS = {
    "math": check_math,
    "signal": check_signal,
    "conv": check_conv,
    "nonlinear": check_nonlinear,
    "network": check_network,
}


def run(scope: str, seed: int = 0, cg_cache=None) -> dict:
    """Run one scope (or ``all``); returns a JSON-ready report."""
    scopes = SCOPES if scope == "all" else (scope,)
    for s in scopes:
        if s not in RUNNERS:
            raise ValueError(f"unknown scope {s!r}; expected one of {SCOPES + ('all',)}")
    checks = []
    t0 = time.perf_counter()
    for s in scopes:
        kw = {"cg_cache": cg_cache} if s == "math" else {}
        for c in RUNNERS[s](seed=seed, **kw):
            checks.append({"scope": s, **c.to_dict()})
    return {
        "scope": scope,
        "seed": seed,
        "passed": all(c["passed"] for c in checks),
        "seconds": time.perf_counter() - t0,
        "checks": checks,
    }
