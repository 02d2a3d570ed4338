"""Direct scan-to-map registration against a truncated distance field.

The cost of a pose ``T = (R, t)`` is

    sum_i  c_i^2 * log(1 + d(R p_i + t)^2 / c_i^2)

where ``d`` is the interpolated map distance and ``c_i`` grows linearly with
the range of ``p_i`` so far points are not discarded as outliers for the
larger residuals a small rotation error gives them. Points that leave the
interpolable part of the grid are dropped. Minimization is Levenberg-Marquardt
over the tangent step ``[dt, dtheta]`` with ``t <- t + dt`` and
``R <- R exp(dtheta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigurationError, DivergedError, NoValidPointsError
from .rotations import Pose
from .tdf import TdfGrid, _grid_args, _trilinear

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    lam: float = 1.0
    max_iterations: int = 50
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-4
    min_valid_points: int = 100

    def __post_init__(self):
        for name in ("lam", "max_iterations", "translation_tolerance", "rotation_tolerance", "min_valid_points"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"registration {name} must be positive")


@dataclass
class RegistrationReport:
    pose: Pose
    iterations: int
    final_cost: float
    initial_cost: float
    valid_points: int
    rejected_out_of_grid: int
    converged: bool


def robust_scale(p, lam: float = 1.0):
    """Cauchy scale for a sensor-frame point: ``lam * (0.1 + 0.1 * |p|)``.

    Accepts a single point or an ``(N, 3)`` array.
    """
    p = np.asarray(p, dtype=float)
    return lam * (0.1 + 0.1 * np.linalg.norm(p, axis=-1))


def cauchy_rho(s, c):
    """Cauchy loss on a squared residual ``s`` with scale ``c``.

    Returns ``(rho, rho', rho'')`` with ``rho(s) = c^2 log(1 + s / c^2)``, so
    ``rho'(0) = 1`` and the loss is quadratic for ``s << c^2``.
    """
    b = c * c
    u = 1.0 + s / b
    return b * np.log1p(s / b), 1.0 / u, -1.0 / (b * u * u)


@njit(nogil=True, cache=True)
def _evaluate(cells, nx, ny, nz, res, ox, oy, oz, pts, scales, R, t, H, g):
    cost = 0.0
    n_valid = 0
    J = np.empty(6)
    for n in range(pts.shape[0]):
        px = pts[n, 0]
        py = pts[n, 1]
        pz = pts[n, 2]
        wx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        wy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        wz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        ok, d, gx, gy, gz = _trilinear(cells, nx, ny, nz, res, ox, oy, oz, wx, wy, wz)
        if not ok:
            continue
        n_valid += 1
        b = scales[n] * scales[n]
        s = d * d
        cost += b * math.log1p(s / b)
        w = 1.0 / (1.0 + s / b)
        # rotation block: p x (R^T grad)
        ax = R[0, 0] * gx + R[1, 0] * gy + R[2, 0] * gz
        ay = R[0, 1] * gx + R[1, 1] * gy + R[2, 1] * gz
        az = R[0, 2] * gx + R[1, 2] * gy + R[2, 2] * gz
        J[0] = gx
        J[1] = gy
        J[2] = gz
        J[3] = py * az - pz * ay
        J[4] = pz * ax - px * az
        J[5] = px * ay - py * ax
        for a in range(6):
            wa = w * J[a]
            g[a] += wa * d
            for c in range(a, 6):
                H[a, c] += wa * J[c]
    for a in range(6):
        for c in range(a):
            H[a, c] = H[c, a]
    return cost, n_valid


def residual(point, pose: Pose, grid: TdfGrid):
    """Distance residual of one sensor-frame point and its tangent Jacobian.

    Returns ``(r, J)`` with ``J = d r / d[dt, dtheta]`` (6,), or ``None`` when
    the transformed point is outside the interpolable grid region.
    """
    point = np.asarray(point, dtype=float)
    R = pose.R
    world = R @ point + pose.t
    ok, d, gx, gy, gz = _trilinear(*_grid_args(grid), *(float(c) for c in world))
    if not ok:
        return None
    grad = np.array([gx, gy, gz])
    return d, np.concatenate([grad, np.cross(point, R.T @ grad)])


@dataclass
class Evaluation:
    cost: float
    valid: int
    hessian: np.ndarray
    rhs: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        """Gradient of the robust cost w.r.t. the tangent step."""
        return 2.0 * self.rhs


def evaluate(cloud, grid: TdfGrid, pose: Pose, lam: float = 1.0, scales=None) -> Evaluation:
    """Robust cost, IRLS normal matrix and right-hand side at ``pose``."""
    pts = np.ascontiguousarray(np.asarray(cloud, dtype=float).reshape(-1, 3))
    if scales is None:
        scales = robust_scale(pts, lam)
    H = np.zeros((6, 6))
    g = np.zeros(6)
    cost, valid = _evaluate(*_grid_args(grid), pts, np.ascontiguousarray(scales, dtype=float),
                            np.ascontiguousarray(pose.R), pose.t, H, g)
    return Evaluation(cost, valid, H, g)


def register(cloud, grid: TdfGrid, initial: Pose, cfg: RegistrationConfig | None = None) -> RegistrationReport:
    """Align a sensor-frame cloud to the map starting from ``initial``.

    Raises
    ------
    NoValidPointsError
        Fewer than ``cfg.min_valid_points`` points land inside the grid.
    DivergedError
        The cost became non-finite.
    """
    cfg = cfg or RegistrationConfig()
    pts = np.ascontiguousarray(np.asarray(cloud, dtype=float).reshape(-1, 3))
    n = len(pts)
    scales = robust_scale(pts, cfg.lam)

    pose = initial.copy()
    cur = evaluate(pts, grid, pose, scales=scales)
    if cur.valid < cfg.min_valid_points:
        raise NoValidPointsError(cur.valid, cfg.min_valid_points)
    if not np.isfinite(cur.cost):
        raise DivergedError("non-finite initial cost")
    initial_cost = cur.cost

    mu = 1e-4
    converged = False
    iterations = 0
    while iterations < cfg.max_iterations:
        iterations += 1
        diag = np.diag(cur.hessian)
        A = cur.hessian + np.diag(mu * diag + 1e-12 * (1.0 + diag.max()))
        try:
            delta = np.linalg.solve(A, -cur.rhs)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(A, -cur.rhs, rcond=None)[0]
        if not np.all(np.isfinite(delta)):
            raise DivergedError("non-finite step")
        small = (np.linalg.norm(delta[:3]) < cfg.translation_tolerance
                 and np.linalg.norm(delta[3:]) < cfg.rotation_tolerance)

        cand_pose = pose.retract(delta)
        cand = evaluate(pts, grid, cand_pose, scales=scales)
        if not np.isfinite(cand.cost):
            raise DivergedError(f"non-finite cost at iteration {iterations}")
        if cand.valid >= cfg.min_valid_points and cand.cost <= cur.cost:
            pose, cur = cand_pose, cand
            mu = max(mu / 3.0, 1e-10)
            if small:
                converged = True
                break
        else:
            mu *= 10.0
            if small or mu > 1e8:
                # no downhill step left at this precision
                converged = small
                break

    log.debug("registration: %d iterations, cost %.6g -> %.6g, %d/%d valid",
              iterations, initial_cost, cur.cost, cur.valid, n)
    return RegistrationReport(
        pose=pose,
        iterations=iterations,
        final_cost=float(cur.cost),
        initial_cost=float(initial_cost),
        valid_points=int(cur.valid),
        rejected_out_of_grid=int(n - cur.valid),
        converged=converged,
    )
