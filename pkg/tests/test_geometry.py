"""Rotation representation, metric, and quaternion-averaging tests.

Rotations used as expected values are built by a local Rodrigues helper so
the library's own converters are never their own oracle.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowpose import geometry as geo


def rodrigues(axis, angle_deg):
    """Independent axis-angle rotation construction (test oracle)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    th = math.radians(angle_deg)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(th) * k + (1 - math.cos(th)) * (k @ k)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# 6D representation
# ---------------------------------------------------------------------------

def test_rot6d_identity_from_canonical_basis():
    r6 = np.array([1.0, 0, 0, 0, 1.0, 0])
    assert np.allclose(geo.rot6d_to_matrix(r6), np.eye(3), atol=1e-12)


def test_rot6d_scale_invariance():
    r6 = np.array([2.0, 0, 0, 0, 3.0, 0])
    assert np.allclose(geo.rot6d_to_matrix(r6), np.eye(3), atol=1e-12)


def test_rot6d_first_column_is_normalized_a1():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r6 = rng.standard_normal(6)
        rot = geo.rot6d_to_matrix(r6)
        a1 = r6[:3] / np.linalg.norm(r6[:3])
        assert np.allclose(rot[:, 0], a1, atol=1e-12)


@pytest.mark.parametrize("axis,angle", [((1, 0, 0), 30), ((0, 1, 0), 120), ((1, 1, 1), 77), ((2, -1, 3), 163)])
def test_rot6d_roundtrip_against_rodrigues(axis, angle):
    rot = rodrigues(axis, angle)
    back = geo.rot6d_to_matrix(geo.matrix_to_rot6d(rot))
    assert np.abs(back - rot).max() < 1e-9


def test_rot6d_degenerate_zero_first_column():
    with pytest.raises(geo.DegenerateRotation):
        geo.rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1.0, 0]))


def test_rot6d_degenerate_parallel_columns():
    with pytest.raises(geo.DegenerateRotation):
        geo.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_rot6d_batch_matches_single_and_flags():
    rng = np.random.default_rng(3)
    r6 = rng.standard_normal((10, 6))
    r6[4] = np.array([1.0, 0, 0, -3.0, 0, 0])  # parallel -> degenerate
    rots, ok = geo.rot6d_to_matrix_batch(r6)
    assert not ok[4] and np.allclose(rots[4], np.eye(3))
    for i in range(10):
        if i == 4:
            continue
        assert ok[i]
        assert np.abs(rots[i] - geo.rot6d_to_matrix(r6[i])).max() < 1e-14


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=60, deadline=None)
def test_rot6d_decode_is_orthonormal(seed):
    rng = np.random.default_rng(seed)
    r6 = rng.standard_normal(6)
    if np.linalg.norm(r6[:3]) < 1e-3:
        return
    rot = geo.rot6d_to_matrix(r6)
    assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-8
    assert abs(np.linalg.det(rot) - 1.0) < 1e-8


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=60, deadline=None)
def test_matrix_quat_matrix_roundtrip(seed):
    rng = np.random.default_rng(seed)
    rot = random_rotation(rng)
    back = geo.quat_to_matrix(geo.matrix_to_quat(rot))
    assert np.abs(back - rot).max() < 1e-9


def test_matrix_to_quat_batch_matches_scalar():
    rng = np.random.default_rng(9)
    rots = np.stack([random_rotation(rng) for _ in range(400)])
    # 180-degree axis rotations pin the three trace <= 0 branches exactly
    rots = np.concatenate([rots, np.stack([rodrigues(a, 180.0) for a in np.eye(3)])])
    batch = geo.matrix_to_quat_batch(rots)
    scalar = np.stack([geo.matrix_to_quat(r) for r in rots])
    # same branches and expressions; only the norm reduction order differs
    assert np.abs(batch - scalar).max() < 1e-14
    assert (batch[:, 0] >= 0.0).all()


# ---------------------------------------------------------------------------
# pose container
# ---------------------------------------------------------------------------

def test_pose_vector_roundtrip_is_lossless():
    rng = np.random.default_rng(5)
    vec = rng.standard_normal(9)
    pose = geo.Pose.from_vector(vec)
    assert np.array_equal(pose.as_vector(), vec)


def test_pose_from_matrix_decodes_back():
    rot = rodrigues((1, 2, 3), 41)
    pose = geo.Pose.from_matrix(rot, np.array([0.1, -0.2, 0.3]))
    assert np.abs(pose.matrix() - rot).max() < 1e-9


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_geodesic_identity_is_zero():
    assert geo.geodesic_angle_deg(np.eye(3), np.eye(3)) == 0.0


def test_geodesic_half_turn():
    assert abs(geo.geodesic_angle_deg(np.eye(3), rodrigues((0, 0, 1), 180)) - 180.0) < 1e-9


@pytest.mark.parametrize("angle", [1.0, 30.0, 90.0])
def test_geodesic_known_angles(angle):
    rot = rodrigues((0.3, -1.0, 0.5), angle)
    assert abs(geo.geodesic_angle_deg(np.eye(3), rot) - angle) < 1e-7


def test_geodesic_symmetry():
    rng = np.random.default_rng(11)
    for _ in range(10):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        assert abs(geo.geodesic_angle_deg(r1, r2) - geo.geodesic_angle_deg(r2, r1)) < 1e-10


def test_symmetry_aware_ignores_axis_spin():
    axis = np.array([0.0, 0.0, 1.0])
    r1 = rodrigues((1, 1, 0), 25)
    r2 = r1 @ rodrigues(axis, 57)
    assert geo.symmetry_aware_angle_deg(r1, r2, axis) < 1e-7


def test_symmetry_aware_pure_tilt_reports_tilt():
    axis = np.array([0.0, 0.0, 1.0])
    r1 = np.eye(3)
    for tilt in (5.0, 30.0, 120.0):
        r2 = rodrigues((1, 0, 0), tilt) @ r1  # tilts the +z axis by exactly `tilt`
        assert abs(geo.symmetry_aware_angle_deg(r1, r2, axis) - tilt) < 1e-7


def test_symmetry_aware_spin_invariance_property():
    rng = np.random.default_rng(23)
    axis = np.array([0.0, 0.0, 1.0])
    for _ in range(25):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        base = geo.symmetry_aware_angle_deg(r1, r2, axis)
        phi = rng.uniform(0, 360)
        spun = geo.symmetry_aware_angle_deg(r1 @ rodrigues(axis, phi), r2, axis)
        assert abs(spun - base) < 1e-6


def test_symmetry_aware_identity_zero():
    rot = rodrigues((2, 1, 1), 73)
    assert geo.symmetry_aware_angle_deg(rot, rot, np.array([0, 0, 1.0])) < 1e-9


def test_translation_error_basics():
    assert geo.translation_error(np.zeros(3), np.zeros(3)) == 0.0
    assert abs(geo.translation_error(np.array([1.0, 2, 2]), np.zeros(3)) - 3.0) < 1e-12
    rng = np.random.default_rng(2)
    t1, t2 = rng.standard_normal(3), rng.standard_normal(3)
    assert abs(geo.translation_error(t1, t2) - math.sqrt(((t1 - t2) ** 2).sum())) < 1e-12


def test_batch_metrics_match_singles():
    rng = np.random.default_rng(9)
    ra = np.stack([random_rotation(rng) for _ in range(8)])
    rb = np.stack([random_rotation(rng) for _ in range(8)])
    axis = np.array([0.0, 0.0, 1.0])
    gb = geo.geodesic_angle_deg_batch(ra, rb)
    sb = geo.symmetry_aware_angle_deg_batch(ra, rb, axis)
    for i in range(8):
        assert abs(gb[i] - geo.geodesic_angle_deg(ra[i], rb[i])) < 1e-9
        assert abs(sb[i] - geo.symmetry_aware_angle_deg(ra[i], rb[i], axis)) < 1e-9


# ---------------------------------------------------------------------------
# quaternion averaging
# ---------------------------------------------------------------------------

def eigh_average_oracle(quats):
    """Dense-eigensolver averaging oracle, independent of the Jacobi path."""
    qs = np.asarray(quats, dtype=float)
    qs = qs / np.linalg.norm(qs, axis=1)[:, None]
    m = qs.T @ qs / qs.shape[0]
    _, vecs = np.linalg.eigh(m)
    top = vecs[:, -1]
    if top[0] < 0:
        top = -top
    return top


def test_average_single_quaternion_is_identity_map():
    q = geo.quat_normalize(np.array([0.4, 0.3, -0.5, 0.2]))
    avg = geo.average_quaternions(q[None, :])
    assert np.abs(avg - q).max() < 1e-12


def test_average_of_q_and_minus_q():
    q = geo.quat_normalize(np.array([0.1, 0.7, -0.2, 0.3]))
    avg = geo.average_quaternions(np.stack([q, -q]))
    assert min(np.abs(avg - q).max(), np.abs(avg + q).max()) < 1e-9


def test_average_small_perturbations_stays_close_and_matches_oracle():
    rng = np.random.default_rng(31)
    q0 = geo.quat_normalize(rng.standard_normal(4))
    quats = []
    for _ in range(50):
        # rotate q0 by <= 5 degrees: quaternion multiply with a small rotation
        ang = math.radians(rng.uniform(0, 5))
        ax = rng.standard_normal(3)
        ax /= np.linalg.norm(ax)
        dq = np.array([math.cos(ang / 2), *(math.sin(ang / 2) * ax)])
        w1, v1 = dq[0], dq[1:]
        w2, v2 = q0[0], q0[1:]
        prod = np.concatenate([[w1 * w2 - v1 @ v2], w1 * v2 + w2 * v1 + np.cross(v1, v2)])
        quats.append(prod * rng.choice([-1.0, 1.0]))
    quats = np.stack(quats)
    avg = geo.average_quaternions(quats)
    # within 2 degrees of q0
    r_avg = geo.quat_to_matrix(avg)
    r0 = geo.quat_to_matrix(q0)
    assert geo.geodesic_angle_deg(r_avg, r0) < 2.0
    oracle = eigh_average_oracle(quats)
    assert min(np.abs(avg - oracle).max(), np.abs(avg + oracle).max()) < 1e-8


def test_average_matches_eigh_oracle_randomized():
    rng = np.random.default_rng(17)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        qs = rng.standard_normal((n, 4))
        avg = geo.average_quaternions(qs)
        oracle = eigh_average_oracle(qs)
        assert min(np.abs(avg - oracle).max(), np.abs(avg + oracle).max()) < 1e-8


def test_average_sign_flip_invariance_is_exact():
    rng = np.random.default_rng(13)
    qs = rng.standard_normal((12, 4))
    flips = rng.choice([-1.0, 1.0], size=(12, 1))
    a = geo.average_quaternions(qs)
    b = geo.average_quaternions(qs * flips)
    assert np.array_equal(a, b)


def test_average_fixed_point_property():
    rng = np.random.default_rng(41)
    qs = rng.standard_normal((20, 4))
    qs /= np.linalg.norm(qs, axis=1)[:, None]
    avg = geo.average_quaternions(qs)
    m = qs.T @ qs / qs.shape[0]
    lam = float(avg @ m @ avg)
    assert np.abs(m @ avg - lam * avg).max() < 1e-8


def test_average_degenerate_two_orthogonal():
    qs = np.array([[1.0, 0, 0, 0], [0.0, 1, 0, 0]])
    with pytest.raises(geo.DegenerateAverage):
        geo.average_quaternions(qs)


def test_average_output_on_canonical_hemisphere():
    rng = np.random.default_rng(29)
    for _ in range(10):
        qs = rng.standard_normal((8, 4))
        avg = geo.average_quaternions(qs)
        assert avg[0] >= 0.0
        assert abs(np.linalg.norm(avg) - 1.0) < 1e-12


def test_quat_canonical_tie_break():
    assert np.array_equal(geo.quat_canonical(np.array([0.0, -1.0, 0, 0])), np.array([0.0, 1.0, 0, 0]))
    assert np.array_equal(geo.quat_canonical(np.array([0.0, 0.0, -0.6, 0.8])), np.array([0.0, 0.0, 0.6, -0.8]))
