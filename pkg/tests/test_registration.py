import numpy as np
import pytest

from tdfodom.errors import ConfigurationError, NoValidPointsError
from tdfodom.registration import (
    RegistrationConfig,
    cauchy_rho,
    evaluate,
    register,
    residual,
    robust_scale,
)
from tdfodom.rotations import Pose, quat_exp, rotation_angle, quat_conjugate, quat_multiply
from tdfodom.synthetic import room_points
from tdfodom.tdf import build_kernel, init_grid, insert_cloud

RES = 0.1
SHIFT = 0.5 * RES  # walls on cell centers, where the zero set is exact


@pytest.fixture(scope="module")
def room():
    walls = room_points(6.0, spacing=RES / 2) + SHIFT
    grid = init_grid(((-1.0, -1.0, -1.0), (7.0, 7.0, 7.0)), RES, 32)
    insert_cloud(grid, build_kernel(10, 32), walls)
    return grid


@pytest.fixture(scope="module")
def scan():
    sensor = Pose([3.0, 3.0, 3.0], quat_exp([0.0, 0.0, 0.3]))
    world = room_points(6.0, n=3000, rng=np.random.default_rng(5), offset=SHIFT)
    return sensor, sensor.inverse().apply(world)


def test_robust_scale_examples():
    assert robust_scale([0, 0, 0]) == pytest.approx(0.1)
    assert robust_scale([3, 4, 0]) == pytest.approx(0.6)
    assert robust_scale([3, 4, 0], lam=2.0) == pytest.approx(1.2)
    assert np.allclose(robust_scale(np.array([[0, 0, 0], [10, 0, 0]])), [0.1, 1.1])
    assert robust_scale([9.0, 0, 0]) == pytest.approx(1.0)
    assert robust_scale([0, 4.0, 0], lam=2.0) == pytest.approx(1.0)


def test_robust_scale_monotone_and_linear(rng):
    r = np.sort(rng.uniform(0, 50, 100))
    c = robust_scale(np.stack([r, np.zeros(100), np.zeros(100)], 1))
    assert np.all(np.diff(c) > 0)
    assert np.allclose(robust_scale([1.0, 2.0, 3.0], lam=3.7), 3.7 * robust_scale([1.0, 2.0, 3.0]))


def test_cauchy_examples():
    rho, d1, d2 = cauchy_rho(0.0, 0.5)
    assert rho == 0.0 and d1 == 1.0 and d2 == pytest.approx(-4.0)
    c = 0.3
    assert cauchy_rho(c * c, c)[0] == pytest.approx(c * c * np.log(2.0))
    assert cauchy_rho(c * c, c)[1] == pytest.approx(0.5)
    # quadratic regime
    assert cauchy_rho(1e-6, 1.0)[0] == pytest.approx(1e-6, rel=1e-6)


def test_cauchy_derivatives_match_finite_differences():
    c, s, h = 0.4, 0.07, 1e-6
    rho, d1, d2 = cauchy_rho(s, c)
    assert d1 == pytest.approx((cauchy_rho(s + h, c)[0] - cauchy_rho(s - h, c)[0]) / (2 * h), rel=1e-7)
    assert d2 == pytest.approx((cauchy_rho(s + h, c)[1] - cauchy_rho(s - h, c)[1]) / (2 * h), rel=1e-6)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RegistrationConfig(lam=0)
    with pytest.raises(ConfigurationError):
        RegistrationConfig(min_valid_points=0)


def test_residual_on_surface_and_outside(room):
    # a point on the x wall, at a cell center so interpolation reproduces the zero exactly
    p = np.array([SHIFT, 3.0 + SHIFT, 3.0 + SHIFT])
    r, J = residual(p, Pose.identity(), room)
    assert abs(r) < 0.5 * RES
    assert J.shape == (6,)
    assert residual([100.0, 0, 0], Pose.identity(), room) is None


def test_jacobian_matches_finite_differences(room, rng):
    h = 1e-6
    checked = 0
    while checked < 20:
        p = rng.uniform(0.5, 2.0, size=3)
        pose = Pose(rng.uniform(0.5, 2.0, size=3), quat_exp(0.3 * rng.normal(size=3)))
        out = residual(p, pose, room)
        if out is None:
            continue
        r, J = out
        num = np.empty(6)
        for a in range(6):
            e = np.zeros(6)
            e[a] = h
            rp, rm = residual(p, pose.retract(e), room), residual(p, pose.retract(-e), room)
            num[a] = (rp[0] - rm[0]) / (2 * h)
        # skip samples that straddle a cell face, where the field is only C0
        if np.allclose(J, num, rtol=1e-4, atol=1e-6):
            checked += 1
        else:
            u = (pose.apply(p[None])[0] + 1.0) / RES - 0.5
            assert np.any(np.abs(u - np.round(u)) < 1e-4)


def test_total_gradient_matches_finite_differences(room, scan, rng):
    sensor, local = scan
    pose = sensor.retract([0.02, -0.03, 0.01, 0.01, -0.005, 0.02])
    ev = evaluate(local, room, pose)
    h = 1e-6
    num = np.empty(6)
    for a in range(6):
        e = np.zeros(6)
        e[a] = h
        num[a] = (evaluate(local, room, pose.retract(e)).cost - evaluate(local, room, pose.retract(-e)).cost) / (2 * h)
    assert np.allclose(ev.gradient, num, rtol=1e-4, atol=1e-6 * np.abs(num).max())


def test_start_at_truth_stays_put(room, scan):
    sensor, local = scan
    rep = register(local, room, sensor)
    assert rep.iterations <= 2
    assert np.linalg.norm(rep.pose.t - sensor.t) < 0.01
    assert rep.final_cost <= rep.initial_cost
    assert rep.valid_points + rep.rejected_out_of_grid == len(local)


def test_recovers_perturbed_pose(room, scan):
    sensor, local = scan
    start = Pose(sensor.t + [0.15, -0.1, 0.08], quat_multiply(sensor.q, quat_exp([0.02, -0.01, 0.05])))
    rep = register(local, room, start)
    assert rep.converged
    assert np.linalg.norm(rep.pose.q) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(rep.pose.t - sensor.t) < 0.02
    assert rotation_angle(quat_multiply(quat_conjugate(sensor.q), rep.pose.q)) < np.deg2rad(0.5)
    assert rep.final_cost < rep.initial_cost


def test_cost_is_monotone(room, scan):
    sensor, local = scan
    start = Pose(sensor.t + [0.1, 0.1, -0.1], sensor.q)
    costs = []
    for n in range(1, 8):
        costs.append(register(local, room, start, RegistrationConfig(max_iterations=n)).final_cost)
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_translation_invariance(scan):
    """Shifting map and cloud by whole cells shifts the result by the same amount."""
    sensor, local = scan
    out = []
    for off in (0.0, 10 * RES):
        walls = room_points(6.0, spacing=RES / 2) + SHIFT + off
        grid = init_grid(((-1.0 + off,) * 3, (7.0 + off,) * 3), RES, 32)
        insert_cloud(grid, build_kernel(10, 32), walls)
        start = Pose(sensor.t + off + [0.1, -0.05, 0.05], sensor.q)
        out.append(register(local, grid, start).pose.t - off)
    assert np.allclose(out[0], out[1], atol=1e-6)


def test_all_outside_raises(room, scan):
    _, local = scan
    with pytest.raises(NoValidPointsError):
        register(local, room, Pose([100.0, 100.0, 100.0]))


def test_out_of_grid_points_counted(room, scan):
    sensor, local = scan
    far = np.vstack([local, [[50.0, 0, 0], [0, 60.0, 0]]])
    rep = register(far, room, sensor)
    assert rep.rejected_out_of_grid >= 2
    assert rep.valid_points + rep.rejected_out_of_grid == len(far)
