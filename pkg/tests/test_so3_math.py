import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equilopo.so3_math import (
    CGTable,
    Rotation,
    cg_block,
    clebsch_gordan,
    complex_clebsch_gordan,
    octahedral_group,
    real_spherical_harmonic,
    real_spherical_harmonics,
    s2_quadrature,
    so3_quadrature,
    wigner_matrix,
)

angles = st.tuples(
    st.floats(-math.pi, math.pi), st.floats(0.0, math.pi), st.floats(-math.pi, math.pi)
)
degrees = st.integers(0, 4)


def _rot(a):
    return Rotation.from_euler_zyz(*a)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


@given(angles, angles)
def test_quaternion_unit_norm_after_composition(a, b):
    R = _rot(a) @ _rot(b)
    assert abs(np.linalg.norm(R.q) - 1.0) <= 1e-12
    assert R.q[0] >= 0.0


@given(angles)
def test_compose_with_inverse_is_identity(a):
    R = _rot(a)
    np.testing.assert_allclose((R @ R.inverse()).q, [1, 0, 0, 0], atol=1e-12)


@given(angles)
def test_euler_roundtrip(a):
    R = _rot(a)
    R2 = Rotation.from_euler_zyz(*R.as_euler_zyz())
    np.testing.assert_allclose(R2.as_matrix(), R.as_matrix(), atol=1e-12)


def test_matrix_roundtrip_and_apply():
    rng = np.random.default_rng(0)
    R = Rotation.random(rng, 50)
    m = R.as_matrix()
    np.testing.assert_allclose(Rotation.from_matrix(m).as_matrix(), m, atol=1e-12)
    v = rng.standard_normal(3)
    np.testing.assert_allclose(R.apply(v), m @ v, atol=1e-12)


def test_axis_angle_quarter_turn_about_z():
    R = Rotation.from_axis_angle([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(R.apply([1.0, 0, 0]), [0, 1, 0], atol=1e-15)


def test_octahedral_group_is_closed():
    G = [np.rint(m).astype(int) for m in octahedral_group()]
    assert len(G) == 24
    keys = {m.tobytes() for m in G}
    assert len(keys) == 24
    for a in G:
        for b in G:
            assert (a @ b).tobytes() in keys


# ---------------------------------------------------------------------------
# Wigner matrices
# ---------------------------------------------------------------------------


def test_wigner_degree_zero_and_identity():
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(wigner_matrix(0, Rotation.random(rng)), [[1.0]])
    for l in range(6):
        np.testing.assert_allclose(wigner_matrix(l, Rotation.identity()), np.eye(2 * l + 1), atol=1e-14)


def test_wigner_degree_one_is_permuted_rotation_matrix():
    # real harmonics of degree one are proportional to (y, z, x)
    P = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    R = Rotation.random(np.random.default_rng(2), 10)
    np.testing.assert_allclose(wigner_matrix(1, R), P @ R.as_matrix() @ P.T, atol=1e-13)


@settings(max_examples=30)
@given(angles, angles, degrees)
def test_wigner_homomorphism_orthogonality_inverse(a, b, l):
    R1, R2 = _rot(a), _rot(b)
    d1, d2 = wigner_matrix(l, R1), wigner_matrix(l, R2)
    np.testing.assert_allclose(wigner_matrix(l, R1 @ R2), d1 @ d2, atol=1e-9)
    np.testing.assert_allclose(d1.T @ d1, np.eye(2 * l + 1), atol=1e-10)
    np.testing.assert_allclose(wigner_matrix(l, R1.inverse()), d1.T, atol=1e-10)


def test_wigner_rotates_harmonics_degree_two():
    rng = np.random.default_rng(3)
    R = Rotation.random(rng)
    pts = rng.standard_normal((100, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    lhs = real_spherical_harmonics(2, pts @ R.as_matrix().T)[:, 4:9]
    rhs = real_spherical_harmonics(2, pts)[:, 4:9] @ wigner_matrix(2, R).T
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_wigner_batched_matches_single():
    R = Rotation.random(np.random.default_rng(4), 5)
    batch = wigner_matrix(3, R)
    assert batch.shape == (5, 7, 7)
    for i in range(5):
        np.testing.assert_allclose(batch[i], wigner_matrix(3, R[i]), atol=1e-14)


def test_wigner_negative_degree_rejected():
    with pytest.raises(ValueError):
        wigner_matrix(-1, Rotation.identity())


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def test_harmonic_closed_forms():
    rng = np.random.default_rng(5)
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    assert real_spherical_harmonic(0, 0, v) == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-15)
    assert real_spherical_harmonic(1, 0, [0, 0, 1.0]) == pytest.approx(math.sqrt(3 / (4 * math.pi)), abs=1e-15)
    # Y_2^0 at the north pole: sqrt(5 / 4 pi)
    assert real_spherical_harmonic(2, 0, [0, 0, 1.0]) == pytest.approx(math.sqrt(5 / (4 * math.pi)), abs=1e-15)


def test_harmonics_orthonormal_under_s2_quadrature():
    xyz, w = s2_quadrature(6)
    assert w.sum() == pytest.approx(4 * math.pi, rel=1e-13)
    Y = real_spherical_harmonics(6, xyz)
    np.testing.assert_allclose((Y * w[:, None]).T @ Y, np.eye(49), atol=1e-10)


# ---------------------------------------------------------------------------
# Clebsch-Gordan
# ---------------------------------------------------------------------------


def test_complex_cg_matches_sympy():
    from sympy.physics.quantum.cg import CG

    for j1, j2 in [(1, 1), (2, 1), (2, 2), (3, 2)]:
        for J in range(abs(j1 - j2), j1 + j2 + 1):
            for m1 in range(-j1, j1 + 1):
                for m2 in range(-j2, j2 + 1):
                    M = m1 + m2
                    if abs(M) > J:
                        continue
                    ref = float(CG(j1, m1, j2, m2, J, M).doit())
                    assert complex_clebsch_gordan(j1, m1, j2, m2, J, M) == pytest.approx(ref, abs=1e-14)


def test_cg_trivial_couplings():
    assert clebsch_gordan(0, 0, 0, 0, 0, 0) == pytest.approx(1.0, abs=1e-15)
    for k in (-1, 0, 1):
        assert clebsch_gordan(1, k, 0, 0, 1, k) == pytest.approx(1.0, abs=1e-15)


def test_cg_selection_rules():
    assert clebsch_gordan(1, 0, 1, 0, 3, 0) == 0.0
    assert clebsch_gordan(2, 0, 0, 0, 1, 0) == 0.0
    table = CGTable.build(2)
    assert table(1, 2, 1, 0, 2, 0) == 0.0  # |k| > l
    assert all(abs(l1 - l2) <= l3 <= l1 + l2 for l1, l2, l3 in table.blocks)


def test_cg_orthogonality_up_to_degree_four():
    table = CGTable.build(4)
    for l1 in range(5):
        for l2 in range(5):
            M = np.concatenate(
                [table.blocks[(l1, l2, l3)].reshape(2 * l3 + 1, -1) for l3 in range(abs(l1 - l2), l1 + l2 + 1)]
            )
            np.testing.assert_allclose(M @ M.T, np.eye(M.shape[0]), atol=1e-10)
            np.testing.assert_allclose(M.T @ M, np.eye(M.shape[0]), atol=1e-10)


def test_cg_degree_two_from_two_vectors_matches_triple_wigner_integral():
    q = so3_quadrature(3)
    Rs = q.rotations
    d1 = wigner_matrix(1, Rs)
    d2 = wigner_matrix(2, Rs)
    lhs = np.einsum("n,nab,ncd,nef->acebdf", q.weights, d1, d1, d2)
    C = cg_block(1, 1, 2)
    rhs = np.einsum("eac,fbd->acebdf", C, C) / 5.0
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_cg_table_array_roundtrip():
    table = CGTable.build(3)
    back = CGTable.from_arrays(table.to_arrays())
    assert back.L_max == 3
    for key, blk in table.blocks.items():
        np.testing.assert_array_equal(back.blocks[key], blk)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def test_quadrature_band_zero_single_node():
    q = so3_quadrature(0)
    assert len(q) == 1
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert q.integrate(np.array([2.5])) == pytest.approx(2.5)


def test_quadrature_band_four_examples():
    q = so3_quadrature(4)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)
    d1 = wigner_matrix(1, q.rotations)
    d2 = wigner_matrix(2, q.rotations)
    # entry (k1, k2) = (1, 1) sits at index (l + 1, l + 1)
    assert q.integrate(d2[:, 3, 3] ** 2) == pytest.approx(0.2, abs=1e-10)
    assert abs(q.integrate(d1[:, 1, 1] * d2[:, 2, 2])) <= 1e-10


def test_quadrature_orthogonality_to_degree_four():
    from equilopo.so3_math import wigner_flat

    q = so3_quadrature(4)
    d = wigner_flat(4, q.rotations)
    deg = np.concatenate([np.full((2 * l + 1) ** 2, 2 * l + 1.0) for l in range(5)])
    np.testing.assert_allclose((d * q.weights[:, None]).T @ d * deg[:, None], np.eye(d.shape[1]), atol=1e-9)


def test_quadrature_negative_band_rejected():
    with pytest.raises(ValueError):
        so3_quadrature(-1)
