import logging

import numpy as np
import pytest

from tdfodom.ekf import (
    AB_,
    GB_,
    GRAVITY,
    P_,
    TH_,
    V_,
    EkfNoise,
    EkfState,
    ImuSample,
    InertialEkf,
    PoseBuffer,
    PoseMeasurement,
    gravity_aligned_orientation,
    predict,
    transition_matrix,
    update,
    velocity_from_poses,
)
from tdfodom.errors import MeasurementError, StreamOrderError
from tdfodom.rotations import (
    Pose,
    quat_conjugate,
    quat_exp,
    quat_from_euler,
    quat_log,
    quat_multiply,
    quat_to_matrix,
    rotation_angle,
)


def test_stationary_equilibrium():
    q = quat_exp([0.1, -0.05, 0.7])
    s = EkfState(q=q)
    f = quat_to_matrix(q).T @ -GRAVITY
    for n in range(1, 101):
        s = predict(s, ImuSample(n * 0.01, [0, 0, 0], f))
    assert np.allclose(s.p, 0.0, atol=1e-12)
    assert np.allclose(s.v, 0.0, atol=1e-12)
    assert rotation_angle(quat_multiply(quat_conjugate(q), s.q)) < 1e-12


def test_constant_acceleration_closed_form():
    dt, n = 1e-3, 1000
    s = EkfState()
    for k in range(1, n + 1):
        s = predict(s, ImuSample(k * dt, [0, 0, 0], [1.0, 0.0, 9.81]))
    # p_n = a (n dt)^2 / 2 and v_n = a n dt exactly for this scheme
    assert np.allclose(s.v, [1.0, 0, 0], atol=1e-12)
    assert np.allclose(s.p, [0.5, 0, 0], atol=1e-12)


def test_pure_rotation_quarter_turn():
    s = EkfState()
    for k in range(1, 1001):
        s = predict(s, ImuSample(k * 1e-3, [0, 0, np.pi / 2], -GRAVITY))
    yaw = np.arctan2(quat_to_matrix(s.q)[1, 0], quat_to_matrix(s.q)[0, 0])
    assert yaw == pytest.approx(np.pi / 2, abs=1e-6)


def test_biases_are_subtracted():
    s = EkfState(a_b=np.array([0.2, 0, 0]), g_b=np.array([0, 0, 0.01]))
    s = predict(s, ImuSample(0.01, [0, 0, 0.01], [0.2, 0, 9.81]))
    assert np.allclose(s.v, 0.0, atol=1e-15)
    assert np.allclose(s.q, [0, 0, 0, 1], atol=1e-15)


def test_predict_rejects_old_sample():
    s = EkfState(t=1.0)
    with pytest.raises(StreamOrderError):
        predict(s, ImuSample(1.0, [0, 0, 0], -GRAVITY))
    with pytest.raises(StreamOrderError):
        predict(s, ImuSample(0.5, [0, 0, 0], -GRAVITY))


def test_predict_warns_on_gap(caplog):
    with caplog.at_level(logging.WARNING):
        predict(EkfState(), ImuSample(0.5, [0, 0, 0], -GRAVITY))
    assert "gap" in caplog.text


def _inject(s: EkfState, dx):
    out = s.copy()
    out.p = s.p + dx[P_]
    out.v = s.v + dx[V_]
    out.a_b = s.a_b + dx[AB_]
    out.q = quat_multiply(s.q, quat_exp(dx[TH_]))
    out.g_b = s.g_b + dx[GB_]
    return out


def _difference(a: EkfState, b: EkfState):
    dx = np.zeros(15)
    dx[P_] = a.p - b.p
    dx[V_] = a.v - b.v
    dx[AB_] = a.a_b - b.a_b
    dx[TH_] = quat_log(quat_multiply(quat_conjugate(b.q), a.q))
    dx[GB_] = a.g_b - b.g_b
    return dx


@pytest.mark.parametrize("dt", [0.01, 0.001])
def test_transition_matrix_matches_nominal_propagation(rng, dt):
    """Columns of F equal finite differences of the nominal step through the error injection."""
    s = EkfState(p=rng.normal(size=3), v=rng.normal(size=3), a_b=0.1 * rng.normal(size=3),
                 q=quat_exp(rng.normal(size=3)), g_b=0.01 * rng.normal(size=3), P=np.zeros((15, 15)))
    sample = ImuSample(dt, rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81])
    noise = EkfNoise(gyro_noise=0, accel_noise=0, gyro_bias_walk=0, accel_bias_walk=0)
    base = predict(s, sample, noise)
    h = 1e-6
    cols = []
    for i in range(15):
        e = np.zeros(15)
        e[i] = h
        plus = predict(_inject(s, e), sample, noise)
        minus = predict(_inject(s, -e), sample, noise)
        cols.append((_difference(plus, base) - _difference(minus, base)) / (2 * h))
    numeric = np.array(cols).T
    F = transition_matrix(s, sample)
    # F is the first-order model: it drops the dt^2 terms (p w.r.t. attitude and
    # accel bias, attitude w.r.t. gyro bias), so the mismatch must shrink as dt^2
    assert np.max(np.abs(F - numeric)) < 10.0 * dt ** 2 + 1e-7
    first_order = [P_, V_, AB_, GB_]
    assert np.allclose(F[V_], numeric[V_], atol=1e-7)
    assert all(np.allclose(F[r, r], numeric[r, r], atol=1e-7) for r in first_order)


def test_zero_innovation_update():
    s = EkfState(p=np.array([1.0, 2, 3]), v=np.array([0.5, 0, 0]), q=quat_exp([0.1, 0.2, 0.3]),
                 P=np.eye(15) * 0.01)
    out = update(s, PoseMeasurement(s.p, s.q, s.v))
    assert np.allclose(out.p, s.p, atol=1e-15)
    assert np.allclose(out.v, s.v, atol=1e-15)
    assert np.allclose(out.q, s.q, atol=1e-15)
    assert np.trace(out.P) < np.trace(s.P)


def test_scalar_kalman_gain_per_axis():
    prior = 1.0
    sigma = 1e-3
    s = EkfState(P=np.eye(15) * prior ** 2)
    meas = PoseMeasurement([0.1, 0, 0], [0, 0, 0, 1], [0, 0, 0],
                           noise=np.array([sigma] * 3 + [1.0] * 6))
    out = update(s, meas)
    gain = prior ** 2 / (prior ** 2 + sigma ** 2)
    assert out.p[0] == pytest.approx(0.1 * gain, abs=1e-12)
    assert abs(out.p[0] - 0.1) < 1e-3
    assert out.P[0, 0] == pytest.approx(prior ** 2 * sigma ** 2 / (prior ** 2 + sigma ** 2), rel=1e-9)


def test_near_perfect_measurement_reaches_it():
    s = EkfState(P=np.eye(15) * 0.1)
    q = quat_exp([0.05, -0.02, 0.1])
    out = update(s, PoseMeasurement([0.3, -0.2, 0.1], q, [1, 0, 0], noise=np.full(9, 1e-7)))
    assert np.allclose(out.p, [0.3, -0.2, 0.1], atol=1e-9)
    assert np.allclose(out.v, [1, 0, 0], atol=1e-9)
    assert rotation_angle(quat_multiply(quat_conjugate(q), out.q)) < 1e-6


@pytest.mark.parametrize("bad", ["p", "q", "v"])
def test_nan_measurement_rejected(bad):
    s = EkfState(P=np.eye(15) * 0.1)
    before = s.copy()
    fields = {"p": [0.0, 0, 0], "q": [0, 0, 0, 1.0], "v": [0.0, 0, 0]}
    fields[bad] = [np.nan] * len(fields[bad])
    with pytest.raises(MeasurementError):
        update(s, PoseMeasurement(**fields))
    assert np.array_equal(s.p, before.p) and np.array_equal(s.P, before.P)


def test_covariance_stays_symmetric(rng):
    s = EkfState(P=EkfNoise().initial_covariance())
    for k in range(1, 400):
        s = predict(s, ImuSample(k * 0.005, rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81]))
        assert np.max(np.abs(s.P - s.P.T)) < 1e-12
        if k % 20 == 0:
            s = update(s, PoseMeasurement(s.p + 0.01, quat_multiply(s.q, quat_exp([0.01, 0, 0])), s.v))
            assert np.max(np.abs(s.P - s.P.T)) < 1e-12
            assert np.min(np.linalg.eigvalsh(s.P)) > -1e-12


def test_deterministic_replay(rng):
    samples = [ImuSample(k * 0.005, rng.normal(size=3), rng.normal(size=3)) for k in range(1, 200)]

    def replay():
        s = EkfState(P=EkfNoise().initial_covariance())
        for x in samples:
            s = predict(s, x)
        return s

    a, b = replay(), replay()
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q) and np.array_equal(a.P, b.P)


def test_velocity_from_poses():
    assert np.allclose(velocity_from_poses([0, 0, 0], 0.0, [0.5, 0, 0], 0.1), [5, 0, 0])
    assert np.array_equal(velocity_from_poses([1, 2, 3], 0.0, [1, 2, 3], 0.1), np.zeros(3))
    with pytest.raises(ValueError):
        velocity_from_poses([0, 0, 0], 1.0, [1, 0, 0], 1.0)


def test_gravity_alignment_recovers_tilt():
    q = quat_from_euler(0.1, -0.2, 0.0)
    f = quat_to_matrix(q).T @ -GRAVITY
    est = gravity_aligned_orientation([f] * 10)
    assert rotation_angle(quat_multiply(quat_conjugate(q), est)) < 1e-12


# ---------------------------------------------------------------- pose buffer

def _buffer():
    b = PoseBuffer(horizon=10.0)
    b.append(0.0, Pose([0, 0, 0]))
    b.append(1.0, Pose([1, 0, 0], quat_from_euler(0, 0, np.pi / 2)))
    return b


def test_pose_at_examples():
    b = _buffer()
    assert np.array_equal(b.pose_at(1.0).t, [1, 0, 0])
    mid = b.pose_at(0.5)
    assert np.allclose(mid.t, [0.5, 0, 0])
    assert rotation_angle(mid.q) == pytest.approx(np.pi / 4, abs=1e-9)
    assert rotation_angle(quat_multiply(quat_conjugate(quat_from_euler(0, 0, np.pi / 4)), mid.q)) < 1e-9


def test_pose_at_clamps_with_warning(caplog):
    b = _buffer()
    with caplog.at_level(logging.WARNING):
        assert np.array_equal(b.pose_at(5.0).t, [1, 0, 0])
        assert np.array_equal(b.pose_at(-1.0).t, [0, 0, 0])
    assert "clamping" in caplog.text


def test_poses_at_matches_scalar(rng):
    b = PoseBuffer(horizon=10.0)
    for k in range(20):
        b.append(k * 0.1, Pose(rng.normal(size=3), quat_exp(0.3 * rng.normal(size=3))))
    ts = rng.uniform(0, 1.9, 50)
    trans, rots = b.poses_at(ts)
    for t, tr, R in zip(ts, trans, rots):
        p = b.pose_at(t)
        assert np.allclose(tr, p.t, atol=1e-12)
        assert np.allclose(R, p.R, atol=1e-9)


def test_buffer_trims_and_orders():
    b = PoseBuffer(horizon=1.0)
    for k in range(30):
        b.append(k * 0.1, Pose.identity())
    assert b.span[0] >= 2.9 - 1.0 - 1e-9
    with pytest.raises(StreamOrderError):
        b.append(1.0, Pose.identity())


def test_filter_wrapper_records_buffer_and_holds_last_sample():
    ekf = InertialEkf.at_rest(0.0, [-GRAVITY] * 5)
    for k in range(1, 11):
        ekf.predict(ImuSample(k * 0.005, [0, 0, 0.2], [0.5, 0, 9.81]))
    assert len(ekf.buffer) == 11
    t_last = ekf.state.t
    ekf.predict_to(t_last + 0.01)
    assert ekf.state.t == pytest.approx(t_last + 0.01)
    # 0.06 s of 0.5 m/s^2 along a body x that has yawed by ~0.012 rad
    assert np.linalg.norm(ekf.state.v[:2]) == pytest.approx(0.5 * 0.06, rel=1e-4)
    ekf.update(PoseMeasurement(ekf.state.p, ekf.state.q, ekf.state.v))
    assert np.array_equal(ekf.buffer.pose_at(ekf.state.t).t, ekf.state.p)
