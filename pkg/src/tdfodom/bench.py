"""Microbenchmarks: insertion cost versus grid size, query throughput, registration time.

Insertion tiers reuse one cloud, shifted to each grid's center, so every tier
does identical kernel work and only the grid size changes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GridAllocationError
from .registration import RegistrationConfig, register
from .rotations import Pose, quat_exp
from .synthetic import room_points
from .tdf import available_memory_bytes, build_kernel, init_grid, insert_cloud, query

log = logging.getLogger(__name__)

DEFAULT_TIERS = (10**6, 10**7, 10**8)


@dataclass
class InsertRow:
    cells: int
    dims: tuple
    points: int
    seconds: float | None
    us_per_point: float | None
    note: str = ""


@dataclass
class QueryRow:
    queries: int
    seconds: float | None
    queries_per_second: float | None


@dataclass
class RegistrationRow:
    points: int
    seconds: float | None
    iterations: int | None


@dataclass
class BenchReport:
    resolution: float
    kernel_radius: int
    kernel_bits: int
    insertion: list
    query: QueryRow | None
    registration: list
    scan_update: InsertRow | None

    def to_dict(self) -> dict:
        return asdict(self)

    def insertion_spread(self) -> float | None:
        """Largest over smallest per-point insertion time across measured tiers."""
        t = [r.us_per_point for r in self.insertion if r.us_per_point]
        return max(t) / min(t) if len(t) >= 2 else None

    def table(self) -> str:
        lines = [f"kernel r={self.kernel_radius} ({2 * self.kernel_radius + 1}^3), {self.kernel_bits}-bit masks, "
                 f"resolution {self.resolution} m", "",
                 f"{'cells':>12}{'dims':>20}{'points':>9}{'us/point':>12}  note"]
        for r in self.insertion:
            us = "-" if r.us_per_point is None else f"{r.us_per_point:.2f}"
            lines.append(f"{r.cells:>12}{'x'.join(map(str, r.dims)):>20}{r.points:>9}{us:>12}  {r.note}")
        spread = self.insertion_spread()
        if spread is not None:
            lines.append(f"slowest / fastest tier: {spread:.2f}")
        if self.scan_update is not None and self.scan_update.seconds is not None:
            lines.append(f"\nscan update, {self.scan_update.points} points: {self.scan_update.seconds:.3f} s")
        if self.query is not None:
            qps = "-" if self.query.queries_per_second is None else f"{self.query.queries_per_second:,.0f}"
            lines.append(f"\ninterpolation: {self.query.queries} queries, {qps} queries/s")
        if self.registration:
            lines.append(f"\n{'points':>9}{'seconds':>12}{'iterations':>12}")
            for r in self.registration:
                s = "-" if r.seconds is None else f"{r.seconds:.4f}"
                it = "-" if r.iterations is None else str(r.iterations)
                lines.append(f"{r.points:>9}{s:>12}{it:>12}")
        return "\n".join(lines)


def cube_dims(cells: int) -> tuple[int, int, int]:
    n = round(cells ** (1.0 / 3.0))
    return (n, n, n)


def local_cloud(n: int, half_width: int, resolution: float, seed: int = 0) -> np.ndarray:
    """``n`` points within ``half_width`` cells of the origin (cell-relative, meters)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-half_width, half_width, size=(n, 3)) * resolution


def insertion_tiers(tiers=DEFAULT_TIERS, n_points: int = 5000, resolution: float = 0.05, radius: int = 20,
                    bits: int = 64, half_width: int = 25, repeats: int = 3, workers: int = 1,
                    memory_budget: int | None = None, seed: int = 0) -> list[InsertRow]:
    """Mean per-point insertion time for one cloud placed at the center of each grid size."""
    kernel = build_kernel(radius, bits)
    cloud = local_cloud(n_points, half_width, resolution, seed)
    budget = available_memory_bytes() if memory_budget is None else int(memory_budget)
    # compile and fault in the kernel tables before timing
    warm = init_grid(((0, 0, 0), (8 * radius * resolution,) * 3), resolution, bits)
    insert_cloud(warm, kernel, warm.upper / 2 + cloud[:10])
    del warm

    rows = []
    for cells in tiers:
        dims = cube_dims(cells)
        n_cells = dims[0] * dims[1] * dims[2]
        extent = np.array(dims) * resolution
        try:
            grid = init_grid(((0.0, 0.0, 0.0), extent), resolution, bits, budget)
        except GridAllocationError as exc:
            rows.append(InsertRow(n_cells, dims, n_points, None, None, f"skipped: {exc}"))
            continue
        if n_points == 0:
            rows.append(InsertRow(n_cells, dims, 0, None, None, "no points"))
            continue
        # snap the center to a cell corner so every tier sees the same cell offsets
        center = (np.array(dims) // 2) * resolution
        pts = cloud + center
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            stats = insert_cloud(grid, kernel, pts, workers)
            best = min(best, time.perf_counter() - t0)
        per = best / max(stats.unique_cells, 1)
        rows.append(InsertRow(n_cells, dims, n_points, best, per * 1e6))
        del grid
    return rows


def query_throughput(n: int = 100_000, resolution: float = 0.1, radius: int = 10, bits: int = 32,
                     seed: int = 0) -> QueryRow:
    if n == 0:
        return QueryRow(0, None, None)
    grid, _ = _room_map(resolution, radius, bits)
    rng = np.random.default_rng(seed)
    pts = grid.origin + rng.uniform(0.05, 0.95, size=(n, 3)) * (grid.upper - grid.origin)
    query(grid, pts[:10])
    t0 = time.perf_counter()
    query(grid, pts)
    dt = time.perf_counter() - t0
    return QueryRow(n, dt, n / dt)


def _room_map(resolution: float, radius: int, bits: int):
    walls = room_points(6.0, spacing=resolution / 2, offset=0.0) + 0.37 * resolution
    grid = init_grid(((-1.0, -1.0, -1.0), (7.0, 7.0, 7.0)), resolution, bits)
    insert_cloud(grid, build_kernel(radius, bits), walls)
    return grid, walls


def registration_scaling(sizes=(1000, 5000, 20000), resolution: float = 0.1, radius: int = 10, bits: int = 32,
                         seed: int = 0) -> list[RegistrationRow]:
    """Time to register a perturbed room scan against its own map, per cloud size."""
    grid, _ = _room_map(resolution, radius, bits)
    rng = np.random.default_rng(seed)
    sensor = Pose([3.0, 3.0, 3.0])
    truth_inv = sensor.inverse()
    rows = []
    for n in sizes:
        if n == 0:
            rows.append(RegistrationRow(0, None, None))
            continue
        world = room_points(6.0, n=n, rng=rng) + 0.37 * resolution
        local = truth_inv.apply(world)
        start = Pose(sensor.t + [0.1, -0.1, 0.05], quat_exp([0.0, 0.0, np.deg2rad(2.0)]))
        register(local[:200], grid, start, RegistrationConfig(min_valid_points=1))
        t0 = time.perf_counter()
        rep = register(local, grid, start, RegistrationConfig(min_valid_points=1))
        rows.append(RegistrationRow(n, time.perf_counter() - t0, rep.iterations))
    return rows


def scan_update(n_points: int = 20_000, resolution: float = 0.05, radius: int = 20, bits: int = 64,
                extent=(30.0, 30.0, 12.0), workers: int = 1, memory_budget: int | None = None,
                seed: int = 0) -> InsertRow:
    """Wall time to fuse one scan-sized cloud spread over a room-sized volume."""
    lower = np.zeros(3)
    upper = np.asarray(extent, dtype=float)
    try:
        grid = init_grid((lower, upper), resolution, bits, memory_budget)
    except GridAllocationError as exc:
        return InsertRow(0, (), n_points, None, None, f"skipped: {exc}")
    if n_points == 0:
        return InsertRow(grid.n_cells, grid.dims, 0, None, None, "no points")
    rng = np.random.default_rng(seed)
    center = upper / 2
    # a scan-like shell: ranges 1-15 m around the center, clipped to the box
    d = rng.standard_normal((n_points, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = np.clip(center + d * rng.uniform(1.0, 15.0, (n_points, 1)), lower, upper - resolution)
    kernel = build_kernel(radius, bits)
    t0 = time.perf_counter()
    stats = insert_cloud(grid, kernel, pts, workers)
    dt = time.perf_counter() - t0
    return InsertRow(grid.n_cells, grid.dims, n_points, dt, dt / max(stats.unique_cells, 1) * 1e6)


def run_all(tiers=DEFAULT_TIERS, n_points: int = 5000, resolution: float = 0.05, radius: int = 20,
            bits: int = 64, workers: int = 1, memory_budget: int | None = None, queries: int = 100_000,
            registration_sizes=(1000, 5000, 20000), update_points: int = 20_000,
            update_extent=(30.0, 30.0, 12.0)) -> BenchReport:
    log.info("insertion tiers %s", tiers)
    ins = insertion_tiers(tiers, n_points, resolution, radius, bits, workers=workers, memory_budget=memory_budget)
    upd = scan_update(update_points, resolution, radius, bits, update_extent, workers, memory_budget) \
        if update_points is not None else None
    q = query_throughput(queries)
    reg = registration_scaling(registration_sizes)
    return BenchReport(resolution, radius, bits, ins, q, reg, upd)
