"""LiDAR-inertial odometry loop.

Per scan: IMU prediction up to the scan end, deskew with the high-rate pose
buffer, registration against the distance field starting from the predicted
pose, filter update with the registered pose and the velocity between
successive registrations, and, when the motion since the last keyframe is
large enough, fusion of the scan into the map.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .config import PipelineConfig
from .dataset import Scan, TrajectoryRecord
from .ekf import ImuSample, InertialEkf, PoseBuffer, PoseMeasurement, velocity_from_poses
from .errors import MeasurementError, RegistrationError, StreamOrderError
from .registration import RegistrationReport, register
from .rotations import Pose, relative_pose, rotation_angle
from .tdf import TdfGrid, build_kernel, init_grid, insert_cloud

log = logging.getLogger(__name__)


def deskew(scan: Scan, buffer: PoseBuffer) -> Scan:
    """Express every point in the body frame at ``scan.t_end``.

    Each point is mapped through ``T(t_end)^-1 T(t_i)``. Without per-point
    times, or when the buffer does not cover the scan, the scan passes through.
    """
    times = scan.times
    if times is None:
        log.warning("scan at %.6f has no per-point times; not deskewed", scan.t_end)
        return scan
    if len(scan) == 0:
        return scan
    if not buffer.covers(float(times.min()), scan.t_end):
        log.warning("pose buffer %s does not cover scan [%.6f, %.6f]; not deskewed",
                    buffer.span, float(times.min()), scan.t_end)
        return scan

    trans, rots = buffer.poses_at(times)
    t_end, R_end = buffer.poses_at([scan.t_end])
    t_end, R_end = t_end[0], R_end[0]
    world = np.einsum("nij,nj->ni", rots, scan.points) + trans
    local = (world - t_end) @ R_end
    # points taken at the end pose keep their exact coordinates
    same = np.all(rots == R_end, axis=(1, 2)) & np.all(trans == t_end, axis=1)
    local[same] = scan.points[same]
    return scan.with_points(local, scan.offsets)


def keyframe_due(current: Pose, last_keyframe: Pose, t_th: float, q_th: float) -> bool:
    """True when translation exceeds ``t_th`` meters or rotation exceeds ``q_th`` degrees."""
    rel = relative_pose(last_keyframe, current)
    return bool(np.linalg.norm(rel.t) > t_th or math.degrees(rotation_angle(rel.q)) > q_th)


@dataclass
class Keyframe:
    pose: Pose
    t: float


@dataclass
class OdometryOutput:
    t: float
    pose: Pose
    report: RegistrationReport | None
    map_updated: bool
    degraded: bool = False
    message: str | None = None
    timings: dict = field(default_factory=dict)

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(self.t, self.pose.t.copy(), self.pose.q.copy())


@dataclass
class PhaseStats:
    mean: float
    std: float
    count: int


@dataclass
class RuntimeReport:
    total: PhaseStats
    optimize: PhaseStats
    update: PhaseStats
    scans: int
    keyframes: int
    degraded: int

    def to_dict(self) -> dict:
        return {
            "scans": self.scans,
            "keyframes": self.keyframes,
            "degraded": self.degraded,
            **{name: vars(getattr(self, name)) for name in ("total", "optimize", "update")},
        }

    def table(self) -> str:
        head = f"{'phase':<10}{'mean (s)':>12}{'std (s)':>12}{'n':>8}"
        rows = [head]
        for name in ("total", "optimize", "update"):
            s = getattr(self, name)
            rows.append(f"{name:<10}{s.mean:>12.4f}{s.std:>12.4f}{s.count:>8d}")
        return "\n".join(rows)


def _stats(values) -> PhaseStats:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return PhaseStats(float("nan"), float("nan"), 0)
    return PhaseStats(float(v.mean()), float(v.std()), len(v))


@dataclass
class RunResult:
    outputs: list[OdometryOutput]
    keyframes: list[Keyframe]
    grid: TdfGrid | None
    runtime: RuntimeReport
    map_updates: int

    @property
    def trajectory(self) -> list[TrajectoryRecord]:
        return [o.record() for o in self.outputs]


class Pipeline:
    """Stateful odometry front end; feed it IMU samples and scans in time order."""

    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.kernel = build_kernel(self.cfg.kernel_radius, self.cfg.kernel_bits)
        self.reg_cfg = self.cfg.registration()
        self.noise = self.cfg.noise()
        self.ekf: InertialEkf | None = None
        self.grid: TdfGrid | None = None
        self.keyframes: list[Keyframe] = []
        self.outputs: list[OdometryOutput] = []
        self.map_updates = 0
        self._init_samples: list[ImuSample] = []
        self._last_imu_t = -math.inf
        self._last_scan_t = -math.inf
        self._last_reg: tuple[np.ndarray, float] | None = None

    # ------------------------------------------------------------------ events
    def feed_imu(self, sample: ImuSample) -> None:
        if not sample.t > self._last_imu_t:
            raise StreamOrderError(f"IMU timestamp {sample.t!r} follows {self._last_imu_t!r}",
                                   previous=self._last_imu_t, current=sample.t)
        self._last_imu_t = sample.t
        if self.ekf is None:
            self._init_samples.append(sample)
            horizon = sample.t - self.cfg.init_duration
            while self._init_samples and self._init_samples[0].t < horizon:
                self._init_samples.pop(0)
            return
        if sample.t <= self.ekf.state.t:
            return
        self.ekf.predict(sample)

    def process_scan(self, scan: Scan) -> OdometryOutput:
        if scan.t_end < self._last_scan_t:
            raise StreamOrderError(f"scan ending at {scan.t_end!r} follows one ending at {self._last_scan_t!r}",
                                   previous=self._last_scan_t, current=scan.t_end)
        self._last_scan_t = scan.t_end
        if self.ekf is None:
            out = self._bootstrap(scan)
        else:
            out = self._track(scan)
        self.outputs.append(out)
        return out

    # --------------------------------------------------------------- internals
    def _allocate_grid(self, center: np.ndarray) -> TdfGrid:
        size = np.asarray(self.cfg.map_size)
        z_off = size[2] / 2.0 if self.cfg.map_z_offset is None else self.cfg.map_z_offset
        lower = center - np.array([size[0] / 2.0, size[1] / 2.0, z_off])
        return init_grid((lower, lower + size), self.cfg.resolution, self.cfg.kernel_bits,
                         self.cfg.memory_budget)

    def _insert(self, scan_points: np.ndarray, pose: Pose) -> None:
        insert_cloud(self.grid, self.kernel, pose.apply(scan_points), workers=self.cfg.workers)
        self.map_updates += 1

    def _bootstrap(self, scan: Scan) -> OdometryOutput:
        t0 = time.perf_counter()
        accels = [s.accel for s in self._init_samples]
        self.ekf = InertialEkf.at_rest(scan.t_end, accels, self.noise)
        pose = self.ekf.state.pose
        self.grid = self._allocate_grid(pose.t)
        t1 = time.perf_counter()
        self._insert(scan.points, pose)
        t2 = time.perf_counter()
        self.keyframes.append(Keyframe(pose.copy(), scan.t_end))
        self._last_reg = (pose.t.copy(), scan.t_end)
        return OdometryOutput(scan.t_end, pose, None, True,
                              timings={"total": t2 - t0, "optimize": 0.0, "update": t2 - t1})

    def _track(self, scan: Scan) -> OdometryOutput:
        t0 = time.perf_counter()
        ekf = self.ekf
        ekf.predict_to(scan.t_end)
        cloud = deskew(scan, ekf.buffer) if self.cfg.deskew else scan
        points = cloud.points[:: self.cfg.downsample]
        predicted = ekf.state.pose

        t1 = time.perf_counter()
        report = None
        message = None
        try:
            report = register(points, self.grid, predicted, self.reg_cfg)
        except RegistrationError as exc:
            message = str(exc)
            log.warning("scan %.6f: registration failed (%s); keeping prediction", scan.t_end, exc)
        t2 = time.perf_counter()

        if report is not None:
            p_prev, t_prev = self._last_reg
            vel = velocity_from_poses(p_prev, t_prev, report.pose.t, scan.t_end)
            try:
                ekf.update(PoseMeasurement(report.pose.t, report.pose.q, vel))
                self._last_reg = (report.pose.t.copy(), scan.t_end)
            except MeasurementError as exc:
                message = str(exc)
                report = None

        updated = False
        t3 = t4 = time.perf_counter()
        fused = ekf.state.pose
        if report is not None and keyframe_due(fused, self.keyframes[-1].pose, self.cfg.t_th, self.cfg.q_th):
            t3 = time.perf_counter()
            self._insert(cloud.points, fused)
            t4 = time.perf_counter()
            self.keyframes.append(Keyframe(fused.copy(), scan.t_end))
            updated = True
        timings = {"total": t4 - t0 if updated else time.perf_counter() - t0, "optimize": t2 - t1}
        if updated:
            timings["update"] = t4 - t3
        return OdometryOutput(scan.t_end, fused, report, updated,
                              degraded=report is None, message=message, timings=timings)

    # ----------------------------------------------------------------- reports
    def runtime_report(self) -> RuntimeReport:
        outs = self.outputs[self.cfg.warmup_scans:]
        return RuntimeReport(
            total=_stats([o.timings["total"] for o in outs]),
            optimize=_stats([o.timings["optimize"] for o in outs if o.report is not None]),
            update=_stats([o.timings["update"] for o in outs if "update" in o.timings]),
            scans=len(self.outputs),
            keyframes=len(self.keyframes),
            degraded=sum(o.degraded for o in self.outputs),
        )

    def result(self) -> RunResult:
        return RunResult(list(self.outputs), list(self.keyframes), self.grid,
                         self.runtime_report(), self.map_updates)


def merge_streams(imu_stream: Iterable[ImuSample], scan_stream: Iterable[Scan]) -> Iterator[tuple[str, object]]:
    """Merge by time (IMU at ``t``, scans at ``t_end``); IMU first on ties.

    Raises :class:`StreamOrderError` naming the offending timestamps when
    either stream goes backwards.
    """

    def checked(stream, key, kind, rank):
        last = -math.inf
        for n, item in enumerate(stream):
            t = key(item)
            if t < last or (kind == "imu" and t == last):
                raise StreamOrderError(f"{kind} stream out of order: {t!r} after {last!r}",
                                       previous=last, current=t)
            last = t
            yield (t, rank, n, kind, item)

    merged = heapq.merge(checked(imu_stream, lambda s: s.t, "imu", 0),
                         checked(scan_stream, lambda s: s.t_end, "scan", 1))
    for _, _, _, kind, item in merged:
        yield kind, item


def run(imu_stream: Iterable[ImuSample], scan_stream: Iterable[Scan], cfg: PipelineConfig | None = None,
        pipeline: Pipeline | None = None) -> RunResult:
    pipe = pipeline or Pipeline(cfg)
    for kind, item in merge_streams(imu_stream, scan_stream):
        if kind == "imu":
            pipe.feed_imu(item)
        else:
            pipe.process_scan(item)
    return pipe.result()
