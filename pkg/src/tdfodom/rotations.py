"""Quaternion and SO(3)/SE(3) helpers.

Quaternions are stored as ``[x, y, z, w]`` arrays (Hamilton convention,
scalar last) to match the trajectory file layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q @ q)
    q = q / n
    # keep w >= 0 so equal rotations compare equal
    return -q if q[3] < 0.0 else q


def quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_exp(rotvec):
    """Unit quaternion for the rotation vector ``rotvec`` (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.sqrt(rotvec @ rotvec)
    if angle < 1e-12:
        # second-order series keeps the result unit to machine precision
        q = np.array([0.5 * rotvec[0], 0.5 * rotvec[1], 0.5 * rotvec[2], 1.0 - angle * angle / 8.0])
        return q / np.sqrt(q @ q)
    half = 0.5 * angle
    s = np.sin(half) / angle
    return np.array([rotvec[0] * s, rotvec[1] * s, rotvec[2] * s, np.cos(half)])


def quat_log(q):
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[3] < 0.0:
        q = -q
    vec = q[:3]
    vnorm = np.sqrt(vec @ vec)
    if vnorm < 1e-12:
        return 2.0 * vec / q[3]
    angle = 2.0 * np.arctan2(vnorm, q[3])
    return vec * (angle / vnorm)


def quat_to_matrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def quat_from_euler(roll, pitch, yaw):
    """ZYX convention: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    qx = quat_exp([roll, 0.0, 0.0])
    qy = quat_exp([0.0, pitch, 0.0])
    qz = quat_exp([0.0, 0.0, yaw])
    return quat_normalize(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_slerp(q0, q1, alpha):
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if q0 @ q1 < 0.0:
        q1 = -q1
    delta = quat_log(quat_multiply(quat_conjugate(q0), q1))
    return quat_normalize(quat_multiply(q0, quat_exp(alpha * delta)))


def rotation_angle(q) -> float:
    """Geodesic angle (radians) of the rotation encoded by ``q``."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.sqrt(q[:3] @ q[:3]), abs(q[3]))


@dataclass
class Pose:
    """Rigid transform mapping body-frame points into the world frame."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        return Pose(-quat_to_matrix(qi) @ self.t, qi)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.t + self.R @ other.t, quat_multiply(self.q, other.q))

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def retract(self, delta) -> "Pose":
        """Apply a tangent step ``[dt, dtheta]``: t + dt, R * exp(dtheta)."""
        delta = np.asarray(delta, dtype=float)
        return Pose(self.t + delta[:3], quat_multiply(self.q, quat_exp(delta[3:6])))

    def copy(self) -> "Pose":
        return Pose(self.t.copy(), self.q.copy())


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return a.inverse() @ b
