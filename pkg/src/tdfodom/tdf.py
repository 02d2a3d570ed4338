"""Fast truncated distance fields built from bit-set masks.

A distance ``d`` (in cells) is stored as a 64-bit word with the lowest ``d``
bits set. The minimum of any set of such masks is their bitwise AND, and the
population count recovers the distance, so fusing a point into the map is a
fixed-size AND of a precomputed kernel around the point's cell.

Cells are stored in one dense ``uint64`` array with x varying fastest:
``index = i + nx * (j + ny * k)``.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigurationError, GridAllocationError, ParseError

log = logging.getLogger(__name__)

MASK_WIDTHS = (4, 8, 16, 32, 64)
SNAPSHOT_MAGIC = b"FTDF"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIIIddddI")

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


# --------------------------------------------------------------------------
# mask algebra
# --------------------------------------------------------------------------

def full_mask(bits: int = 64) -> np.uint64:
    """All-ones mask: the truncation distance for a ``bits``-wide encoding."""
    return np.uint64((1 << bits) - 1)


def canonical_mask(distance: int, bits: int = 64) -> np.uint64:
    """Mask with the lowest ``min(distance, bits)`` bits set."""
    d = min(int(distance), bits)
    if d < 0:
        raise ValueError("distance must be non-negative")
    return np.uint64((1 << d) - 1)


def is_canonical(mask) -> bool:
    m = int(mask)
    return m >= 0 and (m + 1) & m == 0


def merge_masks(a, b) -> np.uint64:
    return np.uint64(a) & np.uint64(b)


def distance_cells(mask) -> int:
    """Decode a mask to its L1 distance in cells (population count)."""
    return int(mask).bit_count()


def popcount(masks: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(masks, dtype=np.uint64))


@njit(inline="always")
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------

@dataclass
class BinaryKernel:
    """Truncated L1 field of a single occupied cell at the kernel center.

    ``values[dx + r, dy + r, dz + r]`` holds the mask for offset ``(dx, dy, dz)``.
    The ``row_*`` tables list the footprint (offsets whose L1 is below the
    mask width) as contiguous x-runs, which is what insertion iterates.
    """

    radius: int
    bits: int
    values: np.ndarray
    row_dz: np.ndarray = field(repr=False)
    row_dy: np.ndarray = field(repr=False)
    row_dx0: np.ndarray = field(repr=False)
    row_len: np.ndarray = field(repr=False)
    row_start: np.ndarray = field(repr=False)
    row_masks: np.ndarray = field(repr=False)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def footprint_size(self) -> int:
        return int(self.row_len.sum())

    def value(self, dx: int, dy: int, dz: int) -> np.uint64:
        r = self.radius
        return self.values[dx + r, dy + r, dz + r]


def build_kernel(radius: int = 20, bits: int = 64) -> BinaryKernel:
    if bits not in MASK_WIDTHS:
        raise ConfigurationError(f"mask width must be one of {MASK_WIDTHS}, got {bits}")
    if radius < 1:
        raise ConfigurationError(f"kernel radius must be >= 1, got {radius}")

    offs = np.arange(-radius, radius + 1)
    l1 = np.abs(offs)[:, None, None] + np.abs(offs)[None, :, None] + np.abs(offs)[None, None, :]
    d = np.minimum(l1, bits).astype(np.uint64)
    ones = np.uint64(1)
    # (1 << 64) overflows; saturated entries take the full mask directly
    values = np.where(d >= bits, full_mask(bits), (ones << np.minimum(d, 63)) - ones).astype(np.uint64)

    row_dz, row_dy, row_dx0, row_len, row_start, chunks = [], [], [], [], [], []
    start = 0
    for dz in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            half = min(radius, bits - 1 - abs(dy) - abs(dz))
            if half < 0:
                continue
            row_dz.append(dz)
            row_dy.append(dy)
            row_dx0.append(-half)
            row_len.append(2 * half + 1)
            row_start.append(start)
            chunks.append(values[radius - half:radius + half + 1, dy + radius, dz + radius])
            start += 2 * half + 1

    as_i64 = lambda a: np.asarray(a, dtype=np.int64)  # noqa: E731
    return BinaryKernel(
        radius=radius,
        bits=bits,
        values=values,
        row_dz=as_i64(row_dz),
        row_dy=as_i64(row_dy),
        row_dx0=as_i64(row_dx0),
        row_len=as_i64(row_len),
        row_start=as_i64(row_start),
        row_masks=np.ascontiguousarray(np.concatenate(chunks), dtype=np.uint64),
    )


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------

def available_memory_bytes() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):  # pragma: no cover - non-POSIX
        return 1 << 62


def grid_dims(extent, resolution: float) -> tuple[int, int, int]:
    """Cells per axis needed to cover ``extent`` meters (tolerant to float noise)."""
    extent = np.asarray(extent, dtype=float)
    n = np.ceil(extent / resolution - 1e-9).astype(int)
    return int(n[0]), int(n[1]), int(n[2])


class TdfGrid:
    """Dense fixed-resolution grid of distance masks.

    Parameters
    ----------
    dims : (nx, ny, nz)
        Cell counts per axis.
    resolution : float
        Cell edge length in meters.
    origin : array-like
        World coordinates of the low corner of cell (0, 0, 0).
    bits : int
        Mask width; every fresh cell holds the all-ones mask of this width.
    """

    def __init__(self, dims, resolution: float, origin=(0.0, 0.0, 0.0), bits: int = 64, cells=None):
        if bits not in MASK_WIDTHS:
            raise ConfigurationError(f"mask width must be one of {MASK_WIDTHS}, got {bits}")
        self.dims = tuple(int(n) for n in dims)
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.bits = int(bits)
        n = self.n_cells
        if cells is None:
            cells = np.full(n, full_mask(bits), dtype=np.uint64)
        elif cells.shape != (n,) or cells.dtype != np.uint64:
            raise ValueError("cells must be a flat uint64 array of nx*ny*nz entries")
        self.cells = cells

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def nbytes(self) -> int:
        return self.cells.nbytes

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    def volume(self) -> np.ndarray:
        """Mask array indexed ``[i, j, k]`` (a view, no copy)."""
        nx, ny, nz = self.dims
        return self.cells.reshape(nz, ny, nx).transpose(2, 1, 0)

    def distances(self) -> np.ndarray:
        """Decoded distances in cells, indexed ``[i, j, k]``."""
        return popcount(self.volume())

    def linear_index(self, i: int, j: int, k: int) -> int:
        nx, ny, nz = self.dims
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            raise IndexError(f"cell ({i}, {j}, {k}) outside grid {self.dims}")
        return i + nx * (j + ny * k)

    def world_to_cell(self, p):
        """Cell containing ``p``, or ``None`` when ``p`` is outside the grid."""
        u = (np.asarray(p, dtype=float) - self.origin) / self.resolution
        if not np.all(np.isfinite(u)):
            return None
        idx = np.floor(u).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= self.dims):
            return None
        return int(idx[0]), int(idx[1]), int(idx[2])

    def world_to_cells(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`world_to_cell`: ``(indices (N, 3), in_bounds (N,))``."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        u = (points - self.origin) / self.resolution
        finite = np.all(np.isfinite(u), axis=1)
        idx = np.zeros(u.shape, dtype=np.int64)
        idx[finite] = np.floor(u[finite]).astype(np.int64)
        ok = finite & np.all(idx >= 0, axis=1) & np.all(idx < np.asarray(self.dims), axis=1)
        return idx, ok

    def cell_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + (np.array([i, j, k], dtype=float) + 0.5) * self.resolution

    def mask_at_cell(self, i: int, j: int, k: int) -> np.uint64:
        return self.cells[self.linear_index(i, j, k)]

    def copy(self) -> "TdfGrid":
        return TdfGrid(self.dims, self.resolution, self.origin.copy(), self.bits, self.cells.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TdfGrid):
            return NotImplemented
        return (self.dims == other.dims and self.resolution == other.resolution
                and np.array_equal(self.origin, other.origin) and self.bits == other.bits
                and np.array_equal(self.cells, other.cells))

    def __repr__(self) -> str:
        return (f"TdfGrid(dims={self.dims}, resolution={self.resolution}, "
                f"origin={self.origin.tolist()}, bits={self.bits})")

    # convenience wrappers around the module-level operations
    def insert_point(self, kernel, p):
        insert_point(self, kernel, p)

    def insert_cloud(self, kernel, points, workers: int = 1):
        return insert_cloud(self, kernel, points, workers=workers)

    def distance_at(self, p):
        return distance_at(self, p)

    def distance_and_gradient_at(self, p):
        return distance_and_gradient_at(self, p)


def init_grid(bounds, resolution: float, bits: int = 64, memory_budget: int | None = None) -> TdfGrid:
    """Allocate a grid covering ``bounds = (lower_xyz, upper_xyz)`` with every cell truncated.

    Raises :class:`GridAllocationError` when the dense array would not fit in
    ``memory_budget`` bytes (defaults to currently available physical memory).
    """
    lower, upper = (np.asarray(b, dtype=float).reshape(3) for b in bounds)
    extent = upper - lower
    if not resolution > 0:
        raise ConfigurationError(f"resolution must be positive, got {resolution}")
    if not np.all(extent > 0):
        raise GridAllocationError(0, 0, f"degenerate grid bounds {lower.tolist()} .. {upper.tolist()}")
    dims = grid_dims(extent, resolution)
    required = dims[0] * dims[1] * dims[2] * 8
    budget = available_memory_bytes() if memory_budget is None else int(memory_budget)
    if required > budget:
        raise GridAllocationError(required, budget)
    return TdfGrid(dims, resolution, lower, bits)


# --------------------------------------------------------------------------
# insertion
# --------------------------------------------------------------------------

@njit(nogil=True, cache=True)
def _insert_cells(cells, nx, ny, nz, idx, row_dz, row_dy, row_dx0, row_len, row_start, masks, k_lo, k_hi):
    n_rows = row_dz.shape[0]
    for n in range(idx.shape[0]):
        pi = idx[n, 0]
        pj = idx[n, 1]
        pk = idx[n, 2]
        for r in range(n_rows):
            k = pk + row_dz[r]
            if k < k_lo or k >= k_hi:
                continue
            j = pj + row_dy[r]
            if j < 0 or j >= ny:
                continue
            i0 = pi + row_dx0[r]
            a = 0
            b = row_len[r]
            if i0 < 0:
                a = -i0
            if i0 + b > nx:
                b = nx - i0
            base = i0 + nx * (j + ny * k)
            m0 = row_start[r]
            # unsigned indices skip numba's negative-index wraparound and let the loop vectorize
            for s in range(a, b):
                cells[np.uintp(base + s)] &= masks[np.uintp(m0 + s)]


def _check_kernel(grid: TdfGrid, kernel: BinaryKernel):
    if kernel.bits != grid.bits:
        raise ConfigurationError(f"kernel mask width {kernel.bits} != grid mask width {grid.bits}")


def _apply(grid: TdfGrid, kernel: BinaryKernel, idx: np.ndarray, workers: int):
    nx, ny, nz = grid.dims
    args = (kernel.row_dz, kernel.row_dy, kernel.row_dx0, kernel.row_len, kernel.row_start, kernel.row_masks)
    workers = max(1, min(int(workers), nz))
    if workers == 1 or len(idx) == 0:
        _insert_cells(grid.cells, nx, ny, nz, idx, *args, 0, nz)
        return
    # each worker owns a disjoint z-slab, so no two threads touch the same cell
    edges = np.linspace(0, nz, workers + 1).round().astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_insert_cells, grid.cells, nx, ny, nz, idx, *args, int(lo), int(hi))
            for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo
        ]
        for f in futures:
            f.result()


def insert_point(grid: TdfGrid, kernel: BinaryKernel, p) -> None:
    """AND the kernel into the grid around the cell containing ``p``.

    Points outside the grid are ignored; callers that care filter first.
    """
    _check_kernel(grid, kernel)
    cell = grid.world_to_cell(p)
    if cell is None:
        return
    _apply(grid, kernel, np.array([cell], dtype=np.int64), 1)


@dataclass
class InsertStats:
    inserted: int
    skipped: int
    unique_cells: int


def insert_cloud(grid: TdfGrid, kernel: BinaryKernel, points, workers: int = 1) -> InsertStats:
    """Fuse every in-bounds point of ``points`` into the grid.

    The result is bit-identical to inserting the points one at a time in any
    order, independent of ``workers``.
    """
    _check_kernel(grid, kernel)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    idx, ok = grid.world_to_cells(points)
    idx = idx[ok]
    nx, ny, _ = grid.dims
    # several points in one cell apply the same kernel; AND is idempotent
    lin = idx[:, 0] + nx * (idx[:, 1] + ny * idx[:, 2])
    _, first = np.unique(lin, return_index=True)
    idx = np.ascontiguousarray(idx[np.sort(first)])
    _apply(grid, kernel, idx, workers)
    skipped = int(len(points) - ok.sum())
    if skipped:
        log.debug("insert_cloud skipped %d out-of-grid points", skipped)
    return InsertStats(inserted=int(ok.sum()), skipped=skipped, unique_cells=len(idx))


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------

@njit(nogil=True, cache=True)
def _trilinear(cells, nx, ny, nz, res, ox, oy, oz, x, y, z):
    """Interpolated distance and gradient at (x, y, z); nodes at cell centers."""
    ux = (x - ox) / res - 0.5
    uy = (y - oy) / res - 0.5
    uz = (z - oz) / res - 0.5
    # written so NaN fails the test as well
    if not (ux >= 0.0 and uy >= 0.0 and uz >= 0.0):
        return False, 0.0, 0.0, 0.0, 0.0
    fi = math.floor(ux)
    fj = math.floor(uy)
    fk = math.floor(uz)
    if not (fi < nx - 1 and fj < ny - 1 and fk < nz - 1):
        return False, 0.0, 0.0, 0.0, 0.0
    i = int(fi)
    j = int(fj)
    k = int(fk)
    fx = ux - fi
    fy = uy - fj
    fz = uz - fk

    sy = nx
    sz = nx * ny
    b = i + nx * (j + ny * k)
    d000 = float(_popcount64(cells[b])) * res
    d100 = float(_popcount64(cells[b + 1])) * res
    d010 = float(_popcount64(cells[b + sy])) * res
    d110 = float(_popcount64(cells[b + sy + 1])) * res
    d001 = float(_popcount64(cells[b + sz])) * res
    d101 = float(_popcount64(cells[b + sz + 1])) * res
    d011 = float(_popcount64(cells[b + sz + sy])) * res
    d111 = float(_popcount64(cells[b + sz + sy + 1])) * res

    gx_ = 1.0 - fx
    gy_ = 1.0 - fy
    gz_ = 1.0 - fz

    c00 = d000 * gx_ + d100 * fx
    c10 = d010 * gx_ + d110 * fx
    c01 = d001 * gx_ + d101 * fx
    c11 = d011 * gx_ + d111 * fx
    c0 = c00 * gy_ + c10 * fy
    c1 = c01 * gy_ + c11 * fy
    d = c0 * gz_ + c1 * fz

    dx = ((d100 - d000) * gy_ * gz_ + (d110 - d010) * fy * gz_
          + (d101 - d001) * gy_ * fz + (d111 - d011) * fy * fz) / res
    dy = ((c10 - c00) * gz_ + (c11 - c01) * fz) / res
    dz = (c1 - c0) / res
    return True, d, dx, dy, dz


@njit(nogil=True, cache=True)
def _query_batch(cells, nx, ny, nz, res, ox, oy, oz, pts, valid, dist, grad):
    for n in range(pts.shape[0]):
        ok, d, gx, gy, gz = _trilinear(cells, nx, ny, nz, res, ox, oy, oz, pts[n, 0], pts[n, 1], pts[n, 2])
        valid[n] = ok
        dist[n] = d
        grad[n, 0] = gx
        grad[n, 1] = gy
        grad[n, 2] = gz


def _grid_args(grid: TdfGrid):
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    return grid.cells, nx, ny, nz, grid.resolution, float(ox), float(oy), float(oz)


def distance_and_gradient_at(grid: TdfGrid, p):
    """Interpolated L1 distance (m) and its spatial gradient at ``p``.

    Returns ``None`` when ``p`` is outside the region enclosed by cell centers.
    """
    x, y, z = (float(c) for c in p)
    ok, d, gx, gy, gz = _trilinear(*_grid_args(grid), x, y, z)
    if not ok:
        return None
    return d, np.array([gx, gy, gz])


def distance_at(grid: TdfGrid, p):
    res = distance_and_gradient_at(grid, p)
    return None if res is None else res[0]


def query(grid: TdfGrid, points):
    """Batch interpolation: ``(valid (N,), distance (N,), gradient (N, 3))``."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    n = len(pts)
    valid = np.zeros(n, dtype=np.bool_)
    dist = np.zeros(n)
    grad = np.zeros((n, 3))
    _query_batch(*_grid_args(grid), pts, valid, dist, grad)
    return valid, dist, grad


# --------------------------------------------------------------------------
# snapshot I/O
# --------------------------------------------------------------------------

def save_snapshot(grid: TdfGrid, path) -> None:
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    header = _SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, nx, ny, nz,
                                   grid.resolution, ox, oy, oz, grid.bits)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.cells.astype("<u8", copy=False).tobytes())


def load_snapshot(path) -> TdfGrid:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_SNAPSHOT_HEADER.size)
        if len(head) < _SNAPSHOT_HEADER.size:
            raise ParseError("truncated snapshot header", path=path, offset=len(head))
        magic, version, nx, ny, nz, res, ox, oy, oz, bits = _SNAPSHOT_HEADER.unpack(head)
        if magic != SNAPSHOT_MAGIC:
            raise ParseError(f"bad magic {magic!r}", path=path, offset=0)
        if version != SNAPSHOT_VERSION:
            raise ParseError(f"unsupported snapshot version {version}", path=path, offset=4)
        if bits not in MASK_WIDTHS or not res > 0:
            raise ParseError("invalid resolution or mask width", path=path, offset=20)
        n = nx * ny * nz
        body = fh.read()
    if len(body) != 8 * n:
        raise ParseError(f"expected {8 * n} bytes of cell data, found {len(body)}",
                         path=path, offset=_SNAPSHOT_HEADER.size + min(len(body), 8 * n))
    cells = np.frombuffer(body, dtype="<u8").astype(np.uint64)
    return TdfGrid((nx, ny, nz), res, (ox, oy, oz), bits, cells)


def zero_cells(grid: TdfGrid) -> np.ndarray:
    """Centers (N, 3) of every cell at distance zero, in index order."""
    lin = np.flatnonzero(grid.cells == 0)
    nx, ny, _ = grid.dims
    i = lin % nx
    j = (lin // nx) % ny
    k = lin // (nx * ny)
    return grid.origin + (np.stack([i, j, k], axis=1) + 0.5) * grid.resolution


def write_ply(points, path) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        np.savetxt(fh, points, fmt="%.6f")
