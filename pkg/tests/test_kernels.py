import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from equilopo import _jit, kernels
from equilopo.so3_math import Rotation

needs_numba = pytest.mark.skipif(not _jit.NUMBA_AVAILABLE, reason="numba not installed")


@pytest.fixture
def both_paths():
    saved = _jit.numba_enabled()

    def run(fn):
        _jit.use_numba(True)
        a = fn()
        _jit.use_numba(False)
        b = fn()
        _jit.use_numba(saved)
        return a, b

    yield run
    _jit.use_numba(saved)


def test_counts_and_offsets():
    for L in range(6):
        assert kernels.n_coeff(L) == sum((2 * l + 1) ** 2 for l in range(L + 1))
        assert kernels.degree_offset(L + 1) == kernels.n_coeff(L)


def test_product_tensor_sizes():
    assert kernels.product_tensor(1, 1).nnz == 185
    assert kernels.product_tensor(2, 2).nnz == 4930
    o, i, j, v = kernels.product_tensor(1, 1).symmetric
    assert v.size == 110 and np.all(i <= j)
    assert kernels.product_tensor(2, 2).symmetric[3].size == 2560
    with pytest.raises(ValueError):
        kernels.product_tensor(1, 2).symmetric


@needs_numba
@pytest.mark.parametrize("L1,L2,L_out", [(1, 1, 2), (2, 1, 3), (2, 2, 4), (2, 2, 2)])
def test_cg_product_paths_agree(both_paths, L1, L2, L_out):
    rng = np.random.default_rng(L1 + L2 + L_out)
    pt = kernels.product_tensor(L1, L2, L_out)
    a = rng.standard_normal((7, kernels.n_coeff(L1)))
    b = rng.standard_normal((7, kernels.n_coeff(L2)))
    g = rng.standard_normal((7, kernels.n_coeff(L_out)))
    x, y = both_paths(lambda: kernels.cg_product(a, b, pt))
    np.testing.assert_allclose(x, y, atol=1e-13)
    (ga1, gb1), (ga2, gb2) = both_paths(lambda: kernels.cg_product_vjp(g, a, b, pt))
    np.testing.assert_allclose(ga1, ga2, atol=1e-13)
    np.testing.assert_allclose(gb1, gb2, atol=1e-13)


@needs_numba
@pytest.mark.parametrize("L", [1, 2])
def test_cg_square_paths_agree_with_general_product(both_paths, L):
    rng = np.random.default_rng(L)
    pt = kernels.product_tensor(L, L, 2 * L)
    a = rng.standard_normal((3, 4, kernels.n_coeff(L)))
    g = rng.standard_normal((3, 4, kernels.n_coeff(2 * L)))
    x, y = both_paths(lambda: kernels.cg_square(a, pt))
    np.testing.assert_allclose(x, y, atol=1e-13)
    np.testing.assert_allclose(x, kernels.cg_product(a, a, pt), atol=1e-13)
    u, w = both_paths(lambda: kernels.cg_square_vjp(g, a, pt))
    np.testing.assert_allclose(u, w, atol=1e-13)
    ga, gb = kernels.cg_product_vjp(g, a, a, pt)
    np.testing.assert_allclose(u, ga + gb, atol=1e-13)


@needs_numba
def test_rotate_volume_paths_agree_with_scipy(both_paths):
    rng = np.random.default_rng(3)
    vol = rng.standard_normal((9, 10, 11))
    M = Rotation.random(rng).as_matrix()
    x, y = both_paths(lambda: kernels.rotate_volume(vol, M))
    np.testing.assert_allclose(x, y, atol=1e-13)
    c = (np.array(vol.shape) - 1) / 2
    grid = np.indices(vol.shape).reshape(3, -1) - c[:, None]
    ref = ndimage.map_coordinates(vol, M.T @ grid + c[:, None], order=1, mode="grid-constant", cval=0.0)
    np.testing.assert_allclose(x, ref.reshape(vol.shape), atol=1e-12)


def test_rotate_volume_identity_and_quarter_turn():
    rng = np.random.default_rng(4)
    vol = rng.standard_normal((5, 5, 5))
    np.testing.assert_allclose(kernels.rotate_volume(vol, np.eye(3)), vol, atol=1e-14)
    M = Rotation.from_axis_angle([0, 0, 1], np.pi / 2).as_matrix()
    out = kernels.rotate_volume(vol, M)
    # content at +x moves to +y
    assert out[2, 4, 2] == pytest.approx(vol[4, 2, 2], abs=1e-12)


def test_env_flag_selects_numpy_path():
    code = "from equilopo import _jit; print(_jit.numba_enabled())"
    env = dict(os.environ, EQUILOPO_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"


def test_use_numba_toggle():
    saved = _jit.numba_enabled()
    try:
        _jit.use_numba(False)
        assert not _jit.numba_enabled()
    finally:
        _jit.use_numba(saved)
