import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdfodom.rotations import (
    Pose,
    matrix_to_quat,
    quat_conjugate,
    quat_exp,
    quat_from_euler,
    quat_log,
    quat_multiply,
    quat_slerp,
    quat_to_matrix,
    relative_pose,
    rotation_angle,
    skew,
)

vec3 = st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array)


def rodrigues(v):
    th = np.linalg.norm(v)
    if th < 1e-12:
        return np.eye(3) + skew(v)
    K = skew(v / th)
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


@given(vec3)
def test_exp_matches_rodrigues(v):
    assert np.allclose(quat_to_matrix(quat_exp(v)), rodrigues(v), atol=1e-12)


@given(vec3)
def test_log_inverts_exp(v):
    if np.linalg.norm(v) >= np.pi - 1e-6:
        return
    assert np.allclose(quat_log(quat_exp(v)), v, atol=1e-9)


@given(vec3, vec3)
def test_multiply_matches_matrices(a, b):
    qa, qb = quat_exp(a), quat_exp(b)
    assert np.allclose(quat_to_matrix(quat_multiply(qa, qb)), rodrigues(a) @ rodrigues(b), atol=1e-12)


@given(vec3)
def test_matrix_round_trip(v):
    q = quat_exp(v)
    back = matrix_to_quat(quat_to_matrix(q))
    assert back[3] >= 0
    assert np.allclose(quat_to_matrix(back), quat_to_matrix(q), atol=1e-12)


def test_skew_is_cross_product():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.7, -1.1])
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_euler_yaw():
    q = quat_from_euler(0.0, 0.0, np.pi / 2)
    assert np.allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_slerp_midpoint_is_half_angle():
    q = quat_slerp([0, 0, 0, 1], quat_from_euler(0, 0, np.pi / 2), 0.5)
    assert rotation_angle(q) == pytest.approx(np.pi / 4, abs=1e-12)
    assert np.allclose(q, quat_from_euler(0, 0, np.pi / 4), atol=1e-12)


def test_slerp_takes_short_path():
    a = quat_from_euler(0, 0, 0.1)
    b = -quat_from_euler(0, 0, 0.3)  # same rotation, opposite hemisphere
    q = quat_slerp(a, b, 0.5)
    assert rotation_angle(quat_multiply(quat_conjugate(quat_from_euler(0, 0, 0.2)), q)) < 1e-12


def test_pose_algebra():
    a = Pose([1, 2, 3], quat_exp([0.1, -0.2, 0.3]))
    b = Pose([-0.5, 0.2, 0.1], quat_exp([0.0, 0.4, -0.1]))
    p = np.array([[0.3, -0.7, 2.0]])
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)
    assert np.allclose((a @ relative_pose(a, b)).matrix(), b.matrix())
    assert np.allclose(a.matrix() @ np.append(p[0], 1.0), np.append(a.apply(p)[0], 1.0))


def test_retract_is_right_perturbation():
    a = Pose([1, 2, 3], quat_exp([0.1, -0.2, 0.3]))
    d = np.array([0.01, -0.02, 0.03, 0.002, 0.001, -0.003])
    r = a.retract(d)
    assert np.allclose(r.t, a.t + d[:3])
    assert np.allclose(r.R, a.R @ rodrigues(d[3:]))
    assert np.linalg.norm(r.q) == pytest.approx(1.0, abs=1e-15)
