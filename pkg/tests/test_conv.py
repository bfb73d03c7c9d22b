import time

import numpy as np
import pytest
from scipy import ndimage

from equilopo import autodiff as ad
from equilopo.conv import (
    CENTER,
    OFFSET_CLASS,
    OFFSETS,
    SE3Conv,
    Se3Filter,
    avg_pool,
    check_degrees,
    compile_filter,
    convolve,
    lift,
    rotate_field,
    rotate_filter,
)
from equilopo.kernels import n_coeff
from equilopo.oracles import conv_center
from equilopo.signal import rotate_coeffs
from equilopo.so3_math import Rotation, octahedral_group


def _field(rng, shape, c, L):
    return rng.standard_normal((1,) + shape + (c, n_coeff(L)))


# ---------------------------------------------------------------------------
# degree rules and compilation
# ---------------------------------------------------------------------------


def test_triangle_rule():
    check_degrees(0, 2, 2)
    check_degrees(2, 2, 4)
    with pytest.raises(ValueError):
        check_degrees(0, 1, 2)
    with pytest.raises(ValueError):
        check_degrees(4, 2, 1)
    check_degrees(4, 2, 1, strict=False)
    with pytest.raises(ValueError):
        Se3Filter.random(np.random.default_rng(0), 1, 1, 3)


def test_weight_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Se3Filter(1, 1, 1, 1, 1, {(0, 0): np.zeros((4, 1, 1, 1, 1, 2))})


def test_zero_weights_give_zero_output():
    filt = Se3Filter(1, 1, 2, 2, 3, {})
    assert not compile_filter(filt).any()
    x = _field(np.random.default_rng(0), (4, 4, 4), 2, 1)
    assert not convolve(x, filt).any()


def test_center_offset_has_only_isotropic_filter_part():
    rng = np.random.default_rng(1)
    filt = Se3Filter.random(rng, 1, 2, 1)
    only_aniso = {k: (w if k[1] > 0 else np.zeros_like(w)) for k, w in filt.weights.items()}
    S = compile_filter(Se3Filter(1, 2, 1, 1, 1, only_aniso))
    assert not S[CENTER].any()
    assert np.abs(S).max() > 0


def test_scalar_case_is_radially_tied_3d_convolution():
    rng = np.random.default_rng(2)
    filt = Se3Filter.random(rng, 0, 0, 0)
    S = compile_filter(filt)[:, 0, 0, 0, 0]
    for cls in range(4):
        vals = S[OFFSET_CLASS == cls]
        np.testing.assert_allclose(vals, vals[0], atol=1e-15)
    kernel = S.reshape(3, 3, 3)
    vol = rng.standard_normal((6, 6, 6))
    ref = ndimage.correlate(vol, kernel, mode="constant", cval=0.0)
    got = convolve(vol[None, ..., None, None], filt)[0, ..., 0, 0]
    np.testing.assert_allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("degrees", [(0, 2, 2), (1, 1, 2), (2, 2, 1)])
def test_matches_quadrature_oracle(degrees):
    rng = np.random.default_rng(sum(degrees))
    L_in, Lf, L_out = degrees
    filt = Se3Filter.random(rng, L_in, Lf, L_out, strict=False)
    f = rng.standard_normal((3, 3, 3, n_coeff(L_in)))
    got = convolve(f[None, ..., None, :], filt)[0, 1, 1, 1, 0]
    ref = conv_center(f, filt)
    assert np.abs(got - ref).max() <= 1e-8 * max(1.0, np.abs(ref).max())


def test_bias_enters_degree_zero_only():
    rng = np.random.default_rng(3)
    filt = Se3Filter.random(rng, 1, 1, 1, 1, 2)
    x = _field(rng, (3, 3, 3), 1, 1)
    base = convolve(x, filt)
    filt.bias = np.array([0.5, -1.0])
    out = convolve(x, filt)
    diff = out - base
    np.testing.assert_allclose(diff[..., 0], np.broadcast_to([0.5, -1.0], diff.shape[:-1]), atol=1e-15)
    assert not diff[..., 1:].any()
    f = rng.standard_normal((3, 3, 3, n_coeff(1)))
    one = Se3Filter.random(rng, 1, 1, 1)
    one.bias = np.array([0.3])
    np.testing.assert_allclose(convolve(f[None, ..., None, :], one)[0, 1, 1, 1, 0], conv_center(f, one), atol=1e-12)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def test_impulse_response_equals_s_tensor():
    rng = np.random.default_rng(4)
    filt = Se3Filter.random(rng, 1, 1, 2)
    S = compile_filter(filt)
    x = np.zeros((1, 5, 5, 5, 1, n_coeff(1)))
    v = rng.standard_normal(n_coeff(1))
    x[0, 2, 2, 2, 0] = v
    out = convolve(x, filt)
    for o, (dx, dy, dz) in enumerate(OFFSETS):
        np.testing.assert_allclose(out[0, 2 - dx, 2 - dy, 2 - dz, 0], v @ S[o, 0, :, 0], atol=1e-14)


def test_output_shapes_and_errors():
    rng = np.random.default_rng(5)
    filt = Se3Filter.random(rng, 1, 1, 1, 2, 3)
    x = _field(rng, (6, 5, 4), 2, 1)
    assert convolve(x, filt).shape == (1, 6, 5, 4, 3, 10)
    assert convolve(x, filt, stride=2).shape == (1, 3, 3, 2, 3, 10)
    assert convolve(x, filt, padding="none").shape == (1, 4, 3, 2, 3, 10)
    with pytest.raises(ValueError):
        convolve(x[..., :1], filt)
    with pytest.raises(ValueError):
        convolve(x[..., :1, :], filt)
    with pytest.raises(ValueError):
        convolve(x, filt, padding="reflect")


def test_lift_shape_on_28_cube():
    rng = np.random.default_rng(6)
    filt = Se3Filter.random(rng, 0, 2, 2)
    out = lift(rng.standard_normal((1, 28, 28, 28)), filt)
    assert out.shape == (1, 28, 28, 28, 1, 35)
    with pytest.raises(ValueError):
        lift(np.zeros((1, 4, 4, 4)), Se3Filter.random(rng, 1, 1, 1))


def test_lift_of_constant_field_is_translation_invariant():
    rng = np.random.default_rng(7)
    filt = Se3Filter.random(rng, 0, 2, 2)
    out = lift(np.full((1, 6, 6, 6), 1.7), filt)[0, 1:-1, 1:-1, 1:-1, 0]
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0], out.shape), atol=1e-13)


def test_linearity_in_field_and_weights():
    rng = np.random.default_rng(8)
    f1 = Se3Filter.random(rng, 1, 1, 2, 2, 2)
    f2 = Se3Filter.random(rng, 1, 1, 2, 2, 2)
    x, y = _field(rng, (4, 4, 4), 2, 1), _field(rng, (4, 4, 4), 2, 1)
    a, b = 0.7, -1.3
    np.testing.assert_allclose(convolve(a * x + b * y, f1), a * convolve(x, f1) + b * convolve(y, f1), atol=1e-10)
    mix = Se3Filter(1, 1, 2, 2, 2, {k: a * f1.weights[k] + b * f2.weights[k] for k in f1.weights})
    np.testing.assert_allclose(convolve(x, mix), a * convolve(x, f1) + b * convolve(x, f2), atol=1e-10)


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("degrees", [(0, 2, 2), (1, 1, 2), (2, 2, 1), (2, 1, 1)])
def test_octahedral_input_equivariance(degrees):
    rng = np.random.default_rng(9)
    L_in, Lf, L_out = degrees
    filt = Se3Filter.random(rng, L_in, Lf, L_out, 2, 2, strict=False)
    x = _field(rng, (5, 5, 5), 2, L_in)
    y = convolve(x, filt)
    for m in octahedral_group():
        R = Rotation.from_matrix(m)
        lhs = convolve(rotate_field(x, R), filt)
        rhs = rotate_field(y, R)
        assert np.abs(lhs - rhs).max() <= 1e-6 * np.abs(rhs).max()


def test_strided_conv_is_octahedrally_equivariant_on_odd_grid():
    rng = np.random.default_rng(10)
    filt = Se3Filter.random(rng, 1, 1, 1)
    x = _field(rng, (5, 5, 5), 1, 1)
    y = convolve(x, filt, stride=2)
    for m in octahedral_group()[:6]:
        R = Rotation.from_matrix(m)
        np.testing.assert_allclose(convolve(rotate_field(x, R), filt, stride=2), rotate_field(y, R), atol=1e-12)


def test_filter_rotation_gives_right_action_on_output():
    rng = np.random.default_rng(11)
    filt = Se3Filter.random(rng, 1, 2, 2, 2, 2)
    x = _field(rng, (3, 3, 3), 2, 1)
    y = convolve(x, filt)
    Rs = Rotation.random(rng, 50)
    for i in range(50):
        lhs = convolve(x, rotate_filter(filt, Rs[i]))
        rhs = rotate_coeffs(y, 2, Rs[i], "right")
        assert np.abs(lhs - rhs).max() <= 1e-6 * np.abs(rhs).max()


def test_continuous_rotation_of_single_voxel_field():
    rng = np.random.default_rng(12)
    filt = Se3Filter.random(rng, 2, 2, 2)
    x = np.zeros((1, 3, 3, 3, 1, n_coeff(2)))
    x[0, 1, 1, 1, 0] = rng.standard_normal(n_coeff(2))
    y = convolve(x, filt)[0, 1, 1, 1, 0]
    for R in Rotation.random(rng, 10):
        xr = rotate_coeffs(x, 2, R, "left")
        yr = convolve(xr, filt)[0, 1, 1, 1, 0]
        np.testing.assert_allclose(yr, rotate_coeffs(y, 2, R, "left"), atol=1e-8)


def test_rotate_field_rejects_non_lattice_rotation():
    x = np.zeros((1, 3, 3, 3, 1, 1))
    with pytest.raises(ValueError):
        rotate_field(x, Rotation.from_axis_angle([0, 0, 1], 0.3))


def test_rotate_field_scalar_volume():
    vol = np.arange(27.0).reshape(1, 3, 3, 3)
    R = Rotation.from_axis_angle([0, 0, 1], np.pi / 2)
    out = rotate_field(vol, R)
    # a quarter turn about z sends +x to +y
    assert out[0, 1, 2, 1] == vol[0, 2, 1, 1]


# ---------------------------------------------------------------------------
# layer, pooling, cost
# ---------------------------------------------------------------------------


def test_layer_matches_functional_convolution():
    rng = np.random.default_rng(13)
    layer = SE3Conv(rng, 2, 3, 1, 1, 2, bias=True)
    layer.bias.data[:] = [0.1, 0.2, 0.3]
    x = _field(rng, (4, 4, 4), 2, 1)
    np.testing.assert_allclose(layer(ad.Tensor(x)).data, convolve(x, layer.to_filter()), atol=1e-13)
    with pytest.raises(ValueError):
        layer(ad.Tensor(x[..., :1, :]))


def test_identifiable_parameter_count_excludes_centre_anisotropic_weights():
    layer = SE3Conv(np.random.default_rng(14), 1, 1, 0, 2, 2)
    # l2 = 0 couples to l4 = l1 in {0, 1, 2}; centre class only for l4 = 0
    assert layer.n_params(identifiable=True) == 4 * 1 + 3 * 3 + 3 * 5
    assert layer.n_params() == 4 * (1 + 3 + 5)


def test_avg_pool_values_and_equivariance():
    rng = np.random.default_rng(15)
    x = _field(rng, (4, 4, 4), 1, 1)
    out = avg_pool(ad.Tensor(x)).data
    assert out.shape == (1, 2, 2, 2, 1, 10)
    np.testing.assert_allclose(out[0, 1, 0, 1], x[0, 2:4, 0:2, 2:4].mean(axis=(0, 1, 2)), atol=1e-15)
    for m in octahedral_group():
        R = Rotation.from_matrix(m)
        np.testing.assert_allclose(avg_pool(ad.Tensor(rotate_field(x, R))).data, rotate_field(out, R), atol=1e-13)
    with pytest.raises(ValueError):
        avg_pool(ad.Tensor(np.zeros((1, 3, 4, 4, 1, 1))))


def _timed(x, filt, repeat=3):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        convolve(x, filt)
        best = min(best, time.perf_counter() - t0)
    return best


def test_cost_grows_with_channels_and_degrees():
    rng = np.random.default_rng(16)
    times = []
    for c in (1, 4, 16):
        filt = Se3Filter.random(rng, 1, 1, 1, c, c)
        times.append(_timed(_field(rng, (8, 8, 8), c, 1), filt))
    assert times[0] < times[1] < times[2]
    times = []
    for L in (0, 1, 2):
        filt = Se3Filter.random(rng, L, L, L, 4, 4)
        times.append(_timed(_field(rng, (8, 8, 8), 4, L), filt))
    assert times[0] < times[1] < times[2]
