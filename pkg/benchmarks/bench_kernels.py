"""Compare the numba and pure-numpy paths of the hot kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Both paths run in one process via ``_jit.use_numba``; results are checked to
agree before timing. ``EQUILOPO_NO_NUMBA=1`` selects the numpy path at import
time for normal use.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from equilopo import _jit, kernels
from equilopo.so3_math import Rotation


def _cases(rng):
    cases = []
    for L in (1, 2):
        pt = kernels.product_tensor(L, L, 2 * L)
        n = kernels.n_coeff(L)
        a = rng.standard_normal((8 * 512, n))
        b = rng.standard_normal((8 * 512, n))
        g = rng.standard_normal((8 * 512, kernels.n_coeff(2 * L)))
        cases.append((f"cg_product L={L}", lambda a=a, b=b, pt=pt: kernels.cg_product(a, b, pt)))
        cases.append((f"cg_product_vjp L={L}", lambda g=g, a=a, b=b, pt=pt: kernels.cg_product_vjp(g, a, b, pt)))
        cases.append((f"cg_square L={L}", lambda a=a, pt=pt: kernels.cg_square(a, pt)))
        cases.append((f"cg_square_vjp L={L}", lambda g=g, a=a, pt=pt: kernels.cg_square_vjp(g, a, pt)))
    vol = rng.standard_normal((32, 32, 32))
    M = Rotation.random(rng).as_matrix()
    cases.append(("rotate_volume 32^3", lambda: kernels.rotate_volume(vol, M)))
    return cases


def _time(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _flat(x):
    if isinstance(x, tuple):
        return np.concatenate([np.ravel(v) for v in x])
    return np.ravel(x)


def run(repeat: int = 5, seed: int = 0) -> list:
    if not _jit.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    saved = _jit.numba_enabled()
    try:
        for name, fn in _cases(rng):
            _jit.use_numba(True)
            ref = _flat(fn())  # also triggers compilation
            t_nb = _time(fn, repeat)
            _jit.use_numba(False)
            other = _flat(fn())
            t_np = _time(fn, repeat)
            diff = float(np.abs(ref - other).max() / max(1.0, np.abs(ref).max()))
            rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb, "max_rel_diff": diff})
    finally:
        _jit.use_numba(saved)
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="write results as JSON")
    args = p.parse_args(argv)
    rows = run(args.repeat)
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(f"{r['kernel']:<24}{1e3 * r['numba_s']:>12.2f}{1e3 * r['numpy_s']:>12.2f}"
              f"{r['speedup']:>9.1f}{r['max_rel_diff']:>11.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
