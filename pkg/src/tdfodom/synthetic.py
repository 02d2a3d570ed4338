"""Synthetic scenes, trajectories and sensor streams with exact ground truth.

Scenes are an axis-aligned enclosure plus solid axis-aligned boxes, which
keeps ray casting exact and vectorizable. Run as a module to write a small
dataset (scans, IMU CSV, ground truth, manifest, config) to disk::

    python -m tdfodom.synthetic OUT_DIR --length 20
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .config import PipelineConfig, save_config
from .dataset import (
    DatasetManifest,
    Scan,
    TrajectoryRecord,
    write_imu,
    write_manifest,
    write_scan_directory,
    write_trajectory,
)
from .ekf import GRAVITY, ImuSample
from .rotations import Pose, matrix_to_quat, quat_log, quat_multiply, quat_conjugate

IMU_RATE = 200
SCAN_RATE = 10


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)


@dataclass
class Scene:
    """Rays start inside ``enclosure`` and stop at its walls or at an obstacle."""

    enclosure: Box
    obstacles: list[Box] = field(default_factory=list)

    def raycast(self, origins, dirs, max_range: float = np.inf) -> np.ndarray:
        """Distance along each ray to the first surface, ``inf`` beyond ``max_range``."""
        origins = np.ascontiguousarray(origins, dtype=float)
        dirs = np.ascontiguousarray(dirs, dtype=float)
        lo = np.array([b.lo for b in self.obstacles], dtype=float).reshape(-1, 3)
        hi = np.array([b.hi for b in self.obstacles], dtype=float).reshape(-1, 3)
        out = np.empty(len(origins))
        _raycast(origins, dirs, self.enclosure.lo, self.enclosure.hi, lo, hi, out)
        return np.where(out <= max_range, out, np.inf)


@njit(cache=True)
def _raycast(origins, dirs, enc_lo, enc_hi, lo, hi, out):
    for n in range(origins.shape[0]):
        best = np.inf
        for a in range(3):
            d = dirs[n, a]
            if d > 0.0:
                t = (enc_hi[a] - origins[n, a]) / d
            elif d < 0.0:
                t = (enc_lo[a] - origins[n, a]) / d
            else:
                continue
            if 0.0 <= t < best:
                best = t
        for b in range(lo.shape[0]):
            tmin = -np.inf
            tmax = np.inf
            miss = False
            for a in range(3):
                d = dirs[n, a]
                o = origins[n, a]
                if d == 0.0:
                    if o < lo[b, a] or o > hi[b, a]:
                        miss = True
                        break
                    continue
                t1 = (lo[b, a] - o) / d
                t2 = (hi[b, a] - o) / d
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if not miss and tmax >= tmin and 0.0 < tmin < best:
                best = tmin
        out[n] = best


def corridor_scene(length: float = 50.0, width: float = 5.0, height: float = 3.5, margin: float = 6.0,
                   pillar_spacing: float = 2.5, beam_spacing: float = 3.0, seed: int = 0) -> Scene:
    """Straight corridor along +x from ``-margin`` to ``length + margin``.

    Wall pillars, ceiling beams and floor crates break the translational
    symmetry along the corridor.
    """
    rng = np.random.default_rng(seed)
    x0, x1 = -margin, length + margin
    hw = width / 2.0
    obstacles = []
    x = x0 + 1.0
    side = 1.0
    while x < x1 - 1.0:
        depth = rng.uniform(0.25, 0.5)
        w = rng.uniform(0.3, 0.6)
        if side > 0:
            obstacles.append(Box([x, hw - depth, 0.0], [x + w, hw, height]))
        else:
            obstacles.append(Box([x, -hw, 0.0], [x + w, -hw + depth, height]))
        side = -side
        x += pillar_spacing * rng.uniform(0.7, 1.3)
    x = x0 + 2.0
    while x < x1 - 2.0:
        cy = rng.uniform(-hw + 0.8, hw - 0.8)
        s = rng.uniform(0.3, 0.7, size=3)
        obstacles.append(Box([x, cy - s[1] / 2, 0.0], [x + s[0], cy + s[1] / 2, s[2]]))
        x += rng.uniform(4.0, 8.0)
    x = x0 + 0.5
    while x < x1 - 0.5:
        drop = rng.uniform(0.3, 0.6)
        obstacles.append(Box([x, -hw, height - drop], [x + rng.uniform(0.2, 0.4), hw, height]))
        x += beam_spacing * rng.uniform(0.7, 1.3)
    return Scene(Box([x0, -hw, 0.0], [x1, hw, height]), obstacles)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def _smooth(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _smooth_integral(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 - 0.5 * u ** 4


@dataclass
class CorridorTrajectory:
    """At rest for ``rest`` seconds, then a smooth ramp to ``speed`` along +x.

    Gentle lateral, vertical and yaw oscillations fade in with the ramp.
    """

    start: tuple = (0.0, 0.11, 1.37)  # off the grid lattice, like a real start
    rest: float = 1.0
    ramp: float = 2.0
    speed: float = 1.0
    lateral_amp: float = 0.3
    lateral_period: float = 8.0
    vertical_amp: float = 0.1
    vertical_period: float = 5.0
    yaw_amp: float = 0.1
    yaw_period: float = 6.0

    def duration_for(self, length: float) -> float:
        if self.speed <= 0:
            return self.rest
        return self.rest + self.ramp + (length - self.speed * self.ramp / 2.0) / self.speed

    def positions(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tau = t - self.rest
        u = tau / self.ramp
        x = self.speed * self.ramp * _smooth_integral(u) + self.speed * np.maximum(tau - self.ramp, 0.0)
        env = _smooth(u)
        y = self.lateral_amp * np.sin(2 * np.pi * np.maximum(tau, 0) / self.lateral_period) * env
        z = self.vertical_amp * np.sin(2 * np.pi * np.maximum(tau, 0) / self.vertical_period) * env
        return np.stack([x, y, z], axis=1) + np.asarray(self.start)

    def yaw(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tau = t - self.rest
        return self.yaw_amp * np.sin(2 * np.pi * np.maximum(tau, 0) / self.yaw_period) * _smooth(tau / self.ramp)

    def rotations(self, t) -> np.ndarray:
        psi = self.yaw(t)
        c, s = np.cos(psi), np.sin(psi)
        R = np.zeros((len(psi), 3, 3))
        R[:, 0, 0] = c
        R[:, 0, 1] = -s
        R[:, 1, 0] = s
        R[:, 1, 1] = c
        R[:, 2, 2] = 1.0
        return R

    def pose(self, t: float) -> Pose:
        return Pose(self.positions(t)[0], matrix_to_quat(self.rotations(t)[0]))


@dataclass
class ConstantYawTrajectory:
    """Fixed position, yaw growing at a constant rate."""

    yaw_rate: float
    position: tuple = (0.0, 0.0, 0.0)

    def positions(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.tile(np.asarray(self.position, dtype=float), (len(t), 1))

    def rotations(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        psi = self.yaw_rate * t
        c, s = np.cos(psi), np.sin(psi)
        R = np.zeros((len(t), 3, 3))
        R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -s, s, c, 1.0
        return R

    def pose(self, t: float) -> Pose:
        return Pose(self.positions(t)[0], matrix_to_quat(self.rotations(t)[0]))


def imu_from_trajectory(traj, times, gyro_noise: float = 0.0, accel_noise: float = 0.0,
                        rate: float = IMU_RATE, rng=None, h: float = 1e-3) -> list[ImuSample]:
    """Ideal body-frame IMU readings by central differences, plus white noise.

    ``*_noise`` are densities per sqrt(Hz); the per-sample sigma is
    ``density * sqrt(rate)``.
    """
    rng = rng or np.random.default_rng(0)
    times = np.asarray(times, dtype=float)
    p_m, p_0, p_p = traj.positions(times - h), traj.positions(times), traj.positions(times + h)
    acc_world = (p_p - 2.0 * p_0 + p_m) / (h * h)
    R0 = traj.rotations(times)
    Rm = traj.rotations(times - h)
    Rp = traj.rotations(times + h)
    omega = np.empty((len(times), 3))
    for n in range(len(times)):
        qm = matrix_to_quat(Rm[n])
        qp = matrix_to_quat(Rp[n])
        omega[n] = quat_log(quat_multiply(quat_conjugate(qm), qp)) / (2.0 * h)
    f_body = np.einsum("nji,nj->ni", R0, acc_world - GRAVITY)
    sg = gyro_noise * np.sqrt(rate)
    sa = accel_noise * np.sqrt(rate)
    omega = omega + sg * rng.standard_normal(omega.shape)
    f_body = f_body + sa * rng.standard_normal(f_body.shape)
    return [ImuSample(t, w, a) for t, w, a in zip(times, omega, f_body)]


# --------------------------------------------------------------------------
# LiDAR
# --------------------------------------------------------------------------

@dataclass
class LidarModel:
    channels: int = 16
    min_elevation_deg: float = -15.0
    max_elevation_deg: float = 15.0
    azimuth_steps: int = 360
    max_range: float = 30.0
    min_range: float = 0.3
    range_noise: float = 0.0
    period: float = 1.0 / SCAN_RATE

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions (sensor frame) and their sweep fraction in [0, 1)."""
        el = np.deg2rad(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.channels))
        az_idx = np.arange(self.azimuth_steps)
        az = 2 * np.pi * az_idx / self.azimuth_steps
        A, E = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
        frac = np.repeat(az_idx / self.azimuth_steps, self.channels)
        return d, frac


def simulate_scan(scene: Scene, traj, lidar: LidarModel, t_end: float, extrinsics: Pose | None = None,
                  rng=None) -> Scan:
    """One sweep ending at ``t_end``; points are in the LiDAR frame at their own capture time."""
    rng = rng or np.random.default_rng(0)
    extrinsics = extrinsics or Pose.identity()
    t_start = t_end - lidar.period
    dirs, frac = lidar.directions()
    offsets = frac * lidar.period
    times = t_start + offsets
    pos = traj.positions(times)
    rot = traj.rotations(times)
    origin = pos + np.einsum("nij,j->ni", rot, extrinsics.t)
    rot_l = rot @ extrinsics.R
    world_dirs = np.einsum("nij,nj->ni", rot_l, dirs)
    ranges = scene.raycast(origin, world_dirs, lidar.max_range)
    keep = np.isfinite(ranges) & (ranges >= lidar.min_range)
    r = ranges[keep]
    if lidar.range_noise > 0:
        r = r + lidar.range_noise * rng.standard_normal(r.shape)
    points = dirs[keep] * r[:, None]
    return Scan(t_start, t_end, points, offsets[keep])


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------

@dataclass
class SyntheticSequence:
    scans: list[Scan]
    imu: list[ImuSample]
    ground_truth: list[TrajectoryRecord]
    scene: Scene
    trajectory: object
    extrinsics: Pose

    def body_scans(self) -> list[Scan]:
        """Scans with the extrinsics applied, as the dataset reader yields them."""
        return [s.with_points(self.extrinsics.apply(s.points), s.offsets) for s in self.scans]

    @property
    def length(self) -> float:
        p = np.array([r.p for r in self.ground_truth])
        return float(np.linalg.norm(p[-1] - p[0])) if len(p) else 0.0


def corridor_sequence(length: float = 50.0, speed: float = 1.0, gyro_noise: float = 1e-3,
                      accel_noise: float = 1e-2, range_noise: float = 0.005, lidar: LidarModel | None = None,
                      extrinsics: Pose | None = None, seed: int = 0, n_scans: int | None = None,
                      **traj_kwargs) -> SyntheticSequence:
    """Corridor traverse of ``length`` meters (or ``n_scans`` scans after the rest period)."""
    rng = np.random.default_rng(seed)
    lidar = lidar or LidarModel(range_noise=range_noise)
    extrinsics = extrinsics if extrinsics is not None else Pose([0.0, 0.0, 0.1])
    traj = CorridorTrajectory(speed=speed, **traj_kwargs)
    scene = corridor_scene(length=max(length, 1.0), seed=seed)

    first_tick = int(round(traj.rest * IMU_RATE))
    per_scan = IMU_RATE // SCAN_RATE
    if n_scans is None:
        end_tick = int(np.ceil(traj.duration_for(length) * IMU_RATE))
        n_scans = (end_tick - first_tick) // per_scan + 1
    end_tick = first_tick + per_scan * (n_scans - 1)
    # integer ticks make IMU and scan timestamps bit-identical floats
    imu_times = np.arange(0, end_tick + 1) / IMU_RATE
    imu = imu_from_trajectory(traj, imu_times, gyro_noise, accel_noise, rng=rng)

    scans, gt = [], []
    for m in range(n_scans):
        t_end = (first_tick + per_scan * m) / IMU_RATE
        scans.append(simulate_scan(scene, traj, lidar, t_end, extrinsics, rng))
        pose = traj.pose(t_end)
        gt.append(TrajectoryRecord(t_end, pose.t, pose.q))
    return SyntheticSequence(scans, imu, gt, scene, traj, extrinsics)


def corridor_config(length: float = 50.0, **overrides) -> PipelineConfig:
    """Default settings with a grid sized to the corridor instead of 60 x 60 x 25 m.

    The grid is centered on the start along x, so it spans twice the length.
    ``lam`` is halved: a single 16-channel sweep leaves wide gaps between
    rings on the floor and ceiling, and the tighter loss keeps points that
    fall between stored rings from dragging the pose along the corridor.
    """
    base = dict(
        map_size=(2 * length + 16.0, 8.0, 6.0),
        map_z_offset=3.0,
        lam=0.5,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def room_points(extent: float = 6.0, spacing: float | None = None, n: int | None = None, rng=None,
                offset: float = 0.0) -> np.ndarray:
    """Points on three orthogonal walls (x = offset, y = offset, z = offset) of a corner room.

    ``spacing`` gives a regular grid (for building a map); ``n`` gives that
    many uniformly random points.
    """
    rng = rng or np.random.default_rng(0)
    if spacing is not None:
        u = np.arange(0.0, extent + 1e-9, spacing)
        a, b = [m.ravel() for m in np.meshgrid(u, u, indexing="ij")]
        per = len(a)
        walls = [np.stack([np.zeros(per), a, b], 1), np.stack([a, np.zeros(per), b], 1),
                 np.stack([a, b, np.zeros(per)], 1)]
    else:
        per = n // 3
        counts = [per, per, n - 2 * per]
        walls = []
        for axis, c in enumerate(counts):
            uv = rng.uniform(0.0, extent, size=(c, 2))
            w = np.insert(uv, axis, 0.0, axis=1)
            walls.append(w)
    return np.concatenate(walls) + offset


def write_sequence(seq: SyntheticSequence, out_dir, cfg: PipelineConfig | None = None) -> Path:
    """Write scans/, imu.csv, ground_truth.txt, manifest.yaml and config.yaml; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scan_directory(seq.scans, out / "scans")
    write_imu(seq.imu, out / "imu.csv")
    write_trajectory(seq.ground_truth, out / "ground_truth.txt")
    manifest = DatasetManifest(out / "scans", out / "imu.csv", out / "ground_truth.txt", seq.extrinsics, 0.0)
    write_manifest(manifest, out / "manifest.yaml")
    save_config(cfg or corridor_config(max(seq.length, 10.0)), out / "config.yaml")
    return out / "manifest.yaml"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Write a synthetic corridor dataset.")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--length", type=float, default=20.0, help="traverse length in meters")
    ap.add_argument("--speed", type=float, default=1.0, help="cruise speed in m/s")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    seq = corridor_sequence(length=args.length, speed=args.speed, seed=args.seed)
    path = write_sequence(seq, args.out_dir, corridor_config(args.length))
    print(f"wrote {len(seq.scans)} scans and {len(seq.imu)} IMU samples; manifest: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
