"""Error-state EKF over position, velocity, IMU biases and orientation.

Nominal state: ``p, v`` (world), accelerometer bias ``a_b`` (body),
orientation ``q`` (body to world), gyroscope bias ``g_b`` (body).
The 15-dim error state is ordered ``[dp, dv, da_b, dtheta, dg_b]`` with the
orientation error applied on the right: ``q_true = q * exp(dtheta)``.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MeasurementError, StreamOrderError
from .rotations import (
    Pose,
    quat_conjugate,
    quat_exp,
    quat_from_euler,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_slerp,
    quat_to_matrix,
    skew,
)

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

P_, V_, AB_, TH_, GB_ = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
_I3 = np.eye(3)


@dataclass
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = float(self.t)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)


@dataclass
class EkfNoise:
    """Noise model. Densities are per sqrt(Hz); measurement terms are 1-sigma."""

    gyro_noise: float = 1e-3
    accel_noise: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-5
    pos_noise: float = 0.02
    rot_noise_deg: float = 0.5
    vel_noise: float = 0.1
    init_pos_std: float = 1e-3
    init_vel_std: float = 0.1
    init_rot_std_deg: float = 1.0
    init_accel_bias_std: float = 0.1
    init_gyro_bias_std: float = 0.01
    max_dt: float = 0.1

    def measurement_std(self) -> np.ndarray:
        return np.concatenate([
            np.full(3, self.pos_noise),
            np.full(3, np.deg2rad(self.rot_noise_deg)),
            np.full(3, self.vel_noise),
        ])

    def initial_covariance(self) -> np.ndarray:
        std = np.concatenate([
            np.full(3, self.init_pos_std),
            np.full(3, self.init_vel_std),
            np.full(3, self.init_accel_bias_std),
            np.full(3, np.deg2rad(self.init_rot_std_deg)),
            np.full(3, self.init_gyro_bias_std),
        ])
        return np.diag(std ** 2)


@dataclass
class EkfState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    g_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: np.eye(15) * 1e-6)
    t: float = 0.0

    @property
    def pose(self) -> Pose:
        return Pose(self.p.copy(), self.q.copy())

    def copy(self) -> "EkfState":
        return EkfState(self.p.copy(), self.v.copy(), self.a_b.copy(), self.q.copy(),
                        self.g_b.copy(), self.P.copy(), self.t)


@dataclass
class PoseMeasurement:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    noise: np.ndarray | None = None  # 9 standard deviations; None -> filter defaults

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.v = np.asarray(self.v, dtype=float).reshape(3)


def _symmetrize(P):
    return 0.5 * (P + P.T)


def transition_matrix(state: EkfState, sample: ImuSample) -> np.ndarray:
    """First-order error-state Jacobian of one :func:`predict` step."""
    dt = sample.t - state.t
    R = quat_to_matrix(state.q)
    w = sample.omega - state.g_b
    f = sample.accel - state.a_b
    F = np.eye(15)
    F[P_, V_] = _I3 * dt
    F[V_, AB_] = -R * dt
    F[V_, TH_] = -R @ skew(f) * dt
    F[TH_, TH_] = quat_to_matrix(quat_exp(-w * dt))
    F[TH_, GB_] = -_I3 * dt
    return F


def predict(state: EkfState, sample: ImuSample, noise: EkfNoise | None = None) -> EkfState:
    """Propagate the state to ``sample.t`` with one Euler step.

    Attitude, specific force and velocity are all taken at the start of the
    interval, so constant world acceleration integrates exactly.
    """
    noise = noise or EkfNoise()
    dt = sample.t - state.t
    if not dt > 0.0:
        raise StreamOrderError(f"IMU sample at t={sample.t!r} does not follow state time t={state.t!r}",
                               previous=state.t, current=sample.t)
    if dt > noise.max_dt:
        log.warning("IMU gap of %.3f s before t=%.6f", dt, sample.t)

    R = quat_to_matrix(state.q)
    w = sample.omega - state.g_b
    f = sample.accel - state.a_b
    a_world = R @ f + GRAVITY

    new = EkfState(
        p=state.p + state.v * dt + 0.5 * a_world * dt * dt,
        v=state.v + a_world * dt,
        a_b=state.a_b.copy(),
        q=quat_normalize(quat_multiply(state.q, quat_exp(w * dt))),
        g_b=state.g_b.copy(),
        t=sample.t,
    )

    F = transition_matrix(state, sample)

    Q = np.zeros(15)
    Q[V_] = noise.accel_noise ** 2 * dt
    Q[TH_] = noise.gyro_noise ** 2 * dt
    Q[AB_] = noise.accel_bias_walk ** 2 * dt
    Q[GB_] = noise.gyro_bias_walk ** 2 * dt

    new.P = _symmetrize(F @ state.P @ F.T + np.diag(Q))
    return new


def update(state: EkfState, meas: PoseMeasurement, noise: EkfNoise | None = None) -> EkfState:
    """Fuse a stacked position / orientation / velocity measurement.

    A non-finite measurement raises :class:`MeasurementError`; the input state
    is never modified.
    """
    noise = noise or EkfNoise()
    std = noise.measurement_std() if meas.noise is None else np.asarray(meas.noise, dtype=float)
    if not (np.all(np.isfinite(meas.p)) and np.all(np.isfinite(meas.q)) and np.all(np.isfinite(meas.v))
            and np.all(np.isfinite(std)) and np.linalg.norm(meas.q) > 0):
        raise MeasurementError("non-finite pose measurement rejected")
    q_meas = quat_normalize(meas.q)

    y = np.concatenate([
        meas.p - state.p,
        quat_log(quat_multiply(quat_conjugate(state.q), q_meas)),
        meas.v - state.v,
    ])
    H = np.zeros((9, 15))
    H[0:3, P_] = _I3
    H[3:6, TH_] = _I3
    H[6:9, V_] = _I3
    Rm = np.diag(std ** 2)

    P = state.P
    S = H @ P @ H.T + Rm
    K = np.linalg.solve(S, H @ P).T
    dx = K @ y

    dth = dx[TH_]
    new = EkfState(
        p=state.p + dx[P_],
        v=state.v + dx[V_],
        a_b=state.a_b + dx[AB_],
        q=quat_normalize(quat_multiply(state.q, quat_exp(dth))),
        g_b=state.g_b + dx[GB_],
        t=state.t,
    )
    IKH = np.eye(15) - K @ H
    P = IKH @ P @ IKH.T + K @ Rm @ K.T
    G = np.eye(15)
    G[TH_, TH_] = _I3 - skew(0.5 * dth)
    new.P = _symmetrize(G @ P @ G.T)
    return new


def velocity_from_poses(p_prev, t_prev: float, p_curr, t_curr: float) -> np.ndarray:
    dt = t_curr - t_prev
    if not dt > 0.0:
        raise ValueError(f"velocity needs increasing timestamps, got dt={dt!r}")
    return (np.asarray(p_curr, dtype=float) - np.asarray(p_prev, dtype=float)) / dt


def gravity_aligned_orientation(accels) -> np.ndarray:
    """Roll/pitch (zero yaw) quaternion from accelerometer samples taken at rest."""
    f = np.mean(np.asarray(accels, dtype=float).reshape(-1, 3), axis=0)
    roll = np.arctan2(f[1], f[2])
    pitch = np.arctan2(-f[0], np.hypot(f[1], f[2]))
    return quat_from_euler(roll, pitch, 0.0)


class PoseBuffer:
    """Time-sorted poses at IMU rate, trimmed to a sliding ``horizon`` in seconds."""

    def __init__(self, horizon: float = 2.0):
        self.horizon = float(horizon)
        self._t: list[float] = []
        self._poses: list[Pose] = []

    def __len__(self) -> int:
        return len(self._t)

    @property
    def span(self) -> tuple[float, float] | None:
        return (self._t[0], self._t[-1]) if self._t else None

    def append(self, t: float, pose: Pose) -> None:
        if self._t and not t > self._t[-1]:
            raise StreamOrderError(f"pose buffer timestamp {t!r} not after {self._t[-1]!r}",
                                   previous=self._t[-1], current=t)
        self._t.append(float(t))
        self._poses.append(pose)
        cut = bisect.bisect_left(self._t, t - self.horizon)
        if cut > 0:
            del self._t[:cut]
            del self._poses[:cut]

    def replace_last(self, pose: Pose) -> None:
        self._poses[-1] = pose

    def covers(self, t0: float, t1: float) -> bool:
        return bool(self._t) and self._t[0] <= t0 and t1 <= self._t[-1]

    def pose_at(self, t: float) -> Pose:
        """Pose at ``t``: lerp in translation, slerp in rotation; clamped outside the span."""
        if not self._t:
            raise LookupError("pose buffer is empty")
        if t <= self._t[0]:
            if t < self._t[0]:
                log.warning("pose_at(%.6f) before buffer start %.6f; clamping", t, self._t[0])
            return self._poses[0].copy()
        if t >= self._t[-1]:
            if t > self._t[-1]:
                log.warning("pose_at(%.6f) after buffer end %.6f; clamping", t, self._t[-1])
            return self._poses[-1].copy()
        i = bisect.bisect_right(self._t, t)
        t0, t1 = self._t[i - 1], self._t[i]
        a, b = self._poses[i - 1], self._poses[i]
        if t == t0:
            return a.copy()
        alpha = (t - t0) / (t1 - t0)
        return Pose(a.t + alpha * (b.t - a.t), quat_slerp(a.q, b.q, alpha))

    def poses_at(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized interpolation: ``(translations (N, 3), rotation matrices (N, 3, 3))``."""
        times = np.asarray(times, dtype=float)
        tb = np.asarray(self._t)
        tc = np.clip(times, tb[0], tb[-1])
        i = np.clip(np.searchsorted(tb, tc, side="right"), 1, len(tb) - 1)
        t0, t1 = tb[i - 1], tb[i]
        alpha = np.where(t1 > t0, (tc - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
        trans = np.stack([p.t for p in self._poses])
        quats = np.stack([p.q for p in self._poses])
        # a + alpha (b - a) and the pass-through below keep equal neighbors exact
        out_t = trans[i - 1] + alpha[:, None] * (trans[i] - trans[i - 1])
        q0 = quats[i - 1]
        q1 = quats[i] * np.where(np.sum(q0 * quats[i], axis=1) < 0.0, -1.0, 1.0)[:, None]
        same = np.all(q0 == q1, axis=1)
        out_q = np.where(same[:, None], q0, _batch_slerp(q0, q1, alpha))
        return out_t, _batch_quat_to_matrix(out_q)


def _batch_slerp(q0, q1, alpha):
    dot = np.clip(np.sum(q0 * q1, axis=1), -1.0, 1.0)
    theta = np.arccos(dot)
    s = np.sin(theta)
    small = s < 1e-9
    w0 = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * theta) / np.where(small, 1.0, s))
    w1 = np.where(small, alpha, np.sin(alpha * theta) / np.where(small, 1.0, s))
    q = w0[:, None] * q0 + w1[:, None] * q1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _batch_quat_to_matrix(q):
    x, y, z, w = q.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class InertialEkf:
    """Single-writer filter wrapper that also records the high-rate pose buffer."""

    def __init__(self, state: EkfState, noise: EkfNoise | None = None, buffer_horizon: float = 2.0):
        self.state = state
        self.noise = noise or EkfNoise()
        self.buffer = PoseBuffer(buffer_horizon)
        self.buffer.append(state.t, state.pose)
        self._last_sample: ImuSample | None = None

    @classmethod
    def at_rest(cls, t: float, accels, noise: EkfNoise | None = None, buffer_horizon: float = 2.0):
        noise = noise or EkfNoise()
        q = gravity_aligned_orientation(accels) if len(accels) else np.array([0.0, 0.0, 0.0, 1.0])
        state = EkfState(q=q, P=noise.initial_covariance(), t=float(t))
        return cls(state, noise, buffer_horizon)

    def predict(self, sample: ImuSample) -> EkfState:
        self.state = predict(self.state, sample, self.noise)
        self._last_sample = sample
        self.buffer.append(self.state.t, self.state.pose)
        return self.state

    def predict_to(self, t: float) -> EkfState:
        """Advance to ``t`` holding the most recent IMU reading (no-op if already there)."""
        if t > self.state.t:
            last = self._last_sample
            omega = last.omega if last is not None else self.state.g_b
            accel = last.accel if last is not None else quat_to_matrix(self.state.q).T @ -GRAVITY + self.state.a_b
            self.predict(ImuSample(t, omega, accel))
        return self.state

    def update(self, meas: PoseMeasurement) -> EkfState:
        self.state = update(self.state, meas, self.noise)
        # keep the buffer continuous across the correction for the next deskew
        if len(self.buffer) and self.buffer.span[1] == self.state.t:
            self.buffer.replace_last(self.state.pose)
        return self.state
