"""Independent reference implementations used by the tests."""

import numpy as np


def brute_force_tdf(dims, point_cells, radius, bits):
    """Truncated L1 distance per cell by direct minimum over every point cell.

    A kernel of half-width ``radius`` only reaches cells within that Chebyshev
    distance, so farther cells keep the truncation value.
    """
    nx, ny, nz = dims
    out = np.full((nx, ny, nz), bits, dtype=np.int64)
    i = np.arange(nx)[:, None, None]
    j = np.arange(ny)[None, :, None]
    k = np.arange(nz)[None, None, :]
    for pi, pj, pk in {tuple(c) for c in np.asarray(point_cells).tolist()}:
        di, dj, dk = np.abs(i - pi), np.abs(j - pj), np.abs(k - pk)
        l1 = di + dj + dk
        reach = (di <= radius) & (dj <= radius) & (dk <= radius)
        np.minimum(out, np.where(reach, np.minimum(l1, bits), bits), out=out)
    return out


def trilinear_reference(values, resolution, origin, p):
    """Trilinear interpolation of a cell-centered ``values[i, j, k]`` array, written out longhand."""
    u = (np.asarray(p, dtype=float) - origin) / resolution - 0.5
    i0 = np.floor(u).astype(int)
    f = u - i0
    total = 0.0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                w = ((f[0] if di else 1 - f[0]) * (f[1] if dj else 1 - f[1]) * (f[2] if dk else 1 - f[2]))
                total += w * values[i0[0] + di, i0[1] + dj, i0[2] + dk]
    return total


def random_canonical_grid(grid, rng):
    """Fill ``grid`` with random canonical masks (arbitrary, not a valid field)."""
    d = rng.integers(0, grid.bits + 1, size=grid.n_cells)
    full = np.uint64((1 << 64) - 1) if grid.bits == 64 else np.uint64((1 << grid.bits) - 1)
    cells = np.where(d >= 64, full, (np.uint64(1) << d.astype(np.uint64)) - np.uint64(1))
    grid.cells[:] = cells.astype(np.uint64)
    return d


def off_center_planes(u, margin):
    """True where every coordinate of ``u`` (in cell units) is farther than ``margin`` from a center plane."""
    frac = np.asarray(u) - 0.5
    return np.all(np.abs(frac - np.round(frac)) > margin, axis=-1)


def windowed_tdf(dims, point_cells, radius, bits):
    """Same result as :func:`brute_force_tdf`, visiting only each point's reach.

    Cells outside ``min(radius, bits)`` of a point (Chebyshev) keep ``bits``
    anyway, so the direct minimum can be taken over that window alone.
    """
    nx, ny, nz = dims
    out = np.full((nx, ny, nz), bits, dtype=np.int64)
    w = min(radius, bits)
    o = np.arange(-w, w + 1)
    l1 = np.minimum(np.abs(o)[:, None, None] + np.abs(o)[None, :, None] + np.abs(o)[None, None, :], bits)
    for pi, pj, pk in {tuple(c) for c in np.asarray(point_cells).tolist()}:
        lo = np.array([pi - w, pj - w, pk - w])
        a = np.maximum(lo, 0)
        b = np.minimum(lo + 2 * w + 1, dims)
        sub = out[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
        np.minimum(sub, l1[a[0] - lo[0]:b[0] - lo[0], a[1] - lo[1]:b[1] - lo[1], a[2] - lo[2]:b[2] - lo[2]], out=sub)
    return out
