"""Readers and writers for recorded scans, IMU logs, trajectories and manifests.

Scan record layout (little-endian)::

    offset  size  field
    0       4     magic b"FSCN"
    4       4     uint32 point count N
    8       8     float64 t_start (s)
    16      8     float64 t_end (s)
    24      4     uint32 flags (bit 0: per-point time offsets present)
    28      ...   N * (float32 x, y, z[, float32 dt]) with dt relative to t_start

A scan file holds one or more records back to back; a directory holds one
file per scan (``*.scan``).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import yaml

from .ekf import ImuSample
from .errors import InputError, ParseError, StreamOrderError
from .rotations import Pose

SCAN_MAGIC = b"FSCN"
SCAN_SUFFIX = ".scan"
FLAG_TIMES = 0x1
_SCAN_HEADER = struct.Struct("<4sIddI")
IMU_COLUMNS = ("t", "wx", "wy", "wz", "ax", "ay", "az")


@dataclass
class Scan:
    t_start: float
    t_end: float
    points: np.ndarray
    offsets: np.ndarray | None = None  # seconds after t_start, one per point

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
            if len(self.offsets) != len(self.points):
                raise ValueError("one time offset per point required")
        if self.t_end < self.t_start:
            raise ValueError("scan ends before it starts")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def times(self) -> np.ndarray | None:
        return None if self.offsets is None else self.t_start + self.offsets

    def with_points(self, points, offsets=None) -> "Scan":
        return Scan(self.t_start, self.t_end, points, offsets)


@dataclass
class TrajectoryRecord:
    t: float
    p: np.ndarray
    q: np.ndarray

    @property
    def pose(self) -> Pose:
        return Pose(self.p, self.q)


@dataclass
class DatasetManifest:
    scans: Path
    imu: Path
    ground_truth: Path | None = None
    extrinsics: Pose = field(default_factory=Pose.identity)  # LiDAR -> IMU
    time_offset: float = 0.0


# --------------------------------------------------------------------------
# scans
# --------------------------------------------------------------------------

def encode_scan(scan: Scan) -> bytes:
    n = len(scan.points)
    flags = FLAG_TIMES if scan.offsets is not None else 0
    head = _SCAN_HEADER.pack(SCAN_MAGIC, n, scan.t_start, scan.t_end, flags)
    cols = [scan.points.astype("<f4")]
    if scan.offsets is not None:
        cols.append(scan.offsets.astype("<f4")[:, None])
    return head + np.ascontiguousarray(np.hstack(cols)).tobytes()


def write_scans(scans: Iterable[Scan], path) -> None:
    with open(path, "wb") as fh:
        for scan in scans:
            fh.write(encode_scan(scan))


def write_scan_directory(scans: Iterable[Scan], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for n, scan in enumerate(scans):
        (directory / f"{n:06d}{SCAN_SUFFIX}").write_bytes(encode_scan(scan))


def _decode_records(data: bytes, path) -> Iterator[Scan]:
    pos = 0
    while pos < len(data):
        if len(data) - pos < _SCAN_HEADER.size:
            raise ParseError("truncated scan header", path=path, offset=pos)
        magic, n, t0, t1, flags = _SCAN_HEADER.unpack_from(data, pos)
        if magic != SCAN_MAGIC:
            raise ParseError(f"bad scan magic {magic!r}", path=path, offset=pos)
        if flags & ~FLAG_TIMES:
            raise ParseError(f"unknown scan flags {flags:#x}", path=path, offset=pos + 24)
        if not (math.isfinite(t0) and math.isfinite(t1)) or t1 < t0:
            raise ParseError(f"invalid scan times {t0!r}..{t1!r}", path=path, offset=pos + 8)
        width = 4 if flags & FLAG_TIMES else 3
        body = pos + _SCAN_HEADER.size
        end = body + 4 * width * n
        if end > len(data):
            raise ParseError(f"truncated scan body: {n} points need {end - body} bytes, "
                             f"{len(data) - body} available", path=path, offset=len(data))
        rec = np.frombuffer(data, dtype="<f4", count=width * n, offset=body).reshape(n, width)
        points = rec[:, :3].astype(float)
        offsets = rec[:, 3].astype(float) if width == 4 else None
        yield Scan(t0, t1, points, offsets)
        pos = end


def _scan_files(path: Path) -> list[Path]:
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix == SCAN_SUFFIX)

    def start_time(p: Path) -> float:
        with open(p, "rb") as fh:
            head = fh.read(_SCAN_HEADER.size)
        if len(head) < _SCAN_HEADER.size:
            raise ParseError("truncated scan header", path=p, offset=len(head))
        return _SCAN_HEADER.unpack(head)[2]

    return sorted(files, key=lambda p: (start_time(p), p.name))


def read_scans(path, extrinsics: Pose | None = None, time_offset: float = 0.0) -> Iterator[Scan]:
    """Yield scans from a directory of ``.scan`` files or a single concatenated log.

    ``extrinsics`` (LiDAR to IMU) is applied to every point and ``time_offset``
    added to every timestamp so downstream code sees one body frame and clock.
    """
    path = Path(path)
    if path.is_dir():
        files = _scan_files(path)
    elif path.is_file():
        files = [path]
    else:
        raise InputError(f"scan path does not exist: {path}")

    last = -math.inf
    for f in files:
        for scan in _decode_records(f.read_bytes(), f):
            if scan.t_end < last:
                raise StreamOrderError(f"{f}: scan ending at {scan.t_end!r} follows one ending at {last!r}",
                                       previous=last, current=scan.t_end)
            last = scan.t_end
            points = scan.points if extrinsics is None else extrinsics.apply(scan.points)
            yield Scan(scan.t_start + time_offset, scan.t_end + time_offset, points, scan.offsets)


# --------------------------------------------------------------------------
# IMU
# --------------------------------------------------------------------------

def read_imu(path) -> Iterator[ImuSample]:
    """Parse an IMU CSV with header ``t,wx,wy,wz,ax,ay,az`` (SI units)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"IMU file does not exist: {path}")
    try:
        with open(path, newline="") as fh:
            yield from _parse_imu(csv.reader(fh), path)
    except (csv.Error, UnicodeDecodeError) as exc:
        raise ParseError(f"unreadable IMU file: {exc}", path=path) from None


def _parse_imu(reader, path) -> Iterator[ImuSample]:
    header = next(reader, None)
    if header is None:
        return
    if tuple(h.strip().lower() for h in header) != IMU_COLUMNS:
        raise ParseError(f"expected header {','.join(IMU_COLUMNS)}", path=path, line=1)
    last = -math.inf
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 7:
            raise ParseError(f"expected 7 columns, got {len(row)}", path=path, line=line)
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=line) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", path=path, line=line)
        if not vals[0] > last:
            raise StreamOrderError(f"{path}: line {line}: timestamp {vals[0]!r} does not follow {last!r}",
                                   previous=last, current=vals[0], line=line)
        last = vals[0]
        yield ImuSample(vals[0], vals[1:4], vals[4:7])


def write_imu(samples: Iterable[ImuSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_COLUMNS)
        for s in samples:
            w.writerow([repr(float(s.t)), *(repr(float(x)) for x in s.omega), *(repr(float(x)) for x in s.accel)])


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _fmt_time(t: float) -> str:
    s = f"{t:.9f}"
    return s if float(s) == t else repr(float(t))


def format_record(rec: TrajectoryRecord) -> str:
    vals = [*np.asarray(rec.p, dtype=float), *np.asarray(rec.q, dtype=float)]
    return " ".join([_fmt_time(float(rec.t)), *(_fmt(v) for v in vals)])


def write_trajectory(records: Iterable[TrajectoryRecord], path) -> None:
    """One ``t x y z qx qy qz qw`` line per record; values round-trip exactly."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


def read_trajectory(path) -> list[TrajectoryRecord]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"trajectory file does not exist: {path}")
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"unreadable trajectory: {exc}", path=path) from None
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", path=path, line=line_no)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=line_no) from None
        if records and vals[0] < records[-1].t:
            raise StreamOrderError(f"{path}: line {line_no}: trajectory time goes backwards",
                                   previous=records[-1].t, current=vals[0], line=line_no)
        records.append(TrajectoryRecord(vals[0], np.array(vals[1:4]), np.array(vals[4:8])))
    return records


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def load_manifest(path) -> DatasetManifest:
    """Load a YAML manifest; relative paths resolve against the manifest directory."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest does not exist: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (yaml.YAMLError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid manifest: {exc}", path=path) from None
    if not isinstance(data, dict):
        raise ParseError("manifest must be a mapping", path=path)
    base = path.parent

    def resolve(key, required=True):
        val = data.get(key)
        if val is None:
            if required:
                raise InputError(f"{path}: manifest is missing '{key}'")
            return None
        if not isinstance(val, str):
            raise ParseError(f"'{key}' must be a path string", path=path)
        p = Path(val)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise InputError(f"{key} path does not exist: {p}")
        return p

    ext = data.get("extrinsics") or {}
    try:
        rotation = np.asarray(ext.get("rotation", [0.0, 0.0, 0.0, 1.0]), dtype=float).reshape(4)
        if not np.linalg.norm(rotation) > 1e-9:
            raise ValueError("rotation quaternion has zero norm")
        extrinsics = Pose(ext.get("translation", [0.0, 0.0, 0.0]), rotation)
        time_offset = float(data.get("time_offset", 0.0))
    except (AttributeError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid extrinsics or time_offset: {exc}", path=path) from None
    if not (np.all(np.isfinite(extrinsics.t)) and np.all(np.isfinite(extrinsics.q)) and math.isfinite(time_offset)):
        raise ParseError("extrinsics and time_offset must be finite", path=path)
    return DatasetManifest(
        scans=resolve("scans"),
        imu=resolve("imu"),
        ground_truth=resolve("ground_truth", required=False),
        extrinsics=extrinsics,
        time_offset=time_offset,
    )


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    data = {
        "scans": rel(manifest.scans),
        "imu": rel(manifest.imu),
        "extrinsics": {
            "translation": [float(x) for x in manifest.extrinsics.t],
            "rotation": [float(x) for x in manifest.extrinsics.q],
        },
        "time_offset": float(manifest.time_offset),
    }
    if manifest.ground_truth is not None:
        data["ground_truth"] = rel(manifest.ground_truth)
    path.write_text(yaml.safe_dump(data, sort_keys=False))
