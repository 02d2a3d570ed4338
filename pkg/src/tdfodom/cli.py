"""Command-line front end.

Subcommands::

    tdfodom run MANIFEST --out DIR      odometry over a recorded dataset
    tdfodom map POSES SCANS --out DIR   fuse scans at known poses
    tdfodom eval ESTIMATE GROUND_TRUTH  absolute translation error
    tdfodom bench                       distance-field microbenchmarks
    tdfodom export SNAPSHOT OUT.ply     zero-distance cells of a saved map

Exit codes: 0 success, 2 input error, 3 insufficient data, 4 resource limit.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .ate import evaluate_ate
from .config import KEY_HELP, PipelineConfig, load_config, save_config
from .dataset import TrajectoryRecord, load_manifest, read_imu, read_scans, read_trajectory, write_trajectory
from .errors import InputError, TdfOdomError
from .pipeline import Pipeline, run
from .rotations import Pose
from .tdf import (
    build_kernel,
    init_grid,
    insert_cloud,
    load_snapshot,
    popcount,
    save_snapshot,
    write_ply,
    zero_cells,
)

log = logging.getLogger("tdfodom")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DATA = 3
EXIT_RESOURCE = 4

# poses and scans are paired by index; their times must agree this closely
POSE_SCAN_TOLERANCE = 1e-3


# --------------------------------------------------------------------------
# configuration flags
# --------------------------------------------------------------------------

def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration (overrides the --config file)")
    group.add_argument("--config", type=Path, help="YAML file with any of the keys below")
    for key, text in KEY_HELP.items():
        dest = "cfg_" + key
        if key == "map_size":
            group.add_argument(_flag(key), dest=dest, nargs=3, type=float, metavar=("X", "Y", "Z"), help=text)
        elif key == "deskew":
            group.add_argument(_flag(key), dest=dest, action=argparse.BooleanOptionalAction, default=None,
                               help=text)
        else:
            group.add_argument(_flag(key), dest=dest, metavar="V", help=text)


def config_from_args(args) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _keys_epilog() -> str:
    lines = ["configuration keys (file key: meaning):"]
    lines += [f"  {k}: {v}" for k, v in KEY_HELP.items()]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_run(manifest_path, cfg: PipelineConfig, out_dir, snapshot: bool = False, quiet: bool = False) -> int:
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imu = read_imu(manifest.imu)
    scans = read_scans(manifest.scans, manifest.extrinsics, manifest.time_offset)

    pipe = Pipeline(cfg)
    result = run(imu, scans, pipeline=pipe)
    if not result.outputs:
        log.warning("no scans in %s", manifest.scans)

    write_trajectory(result.trajectory, out / "trajectory.txt")
    write_trajectory([TrajectoryRecord(k.t, k.pose.t, k.pose.q) for k in result.keyframes], out / "keyframes.txt")
    report = result.runtime
    (out / "timing.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "timing.txt").write_text(report.table() + "\n")
    save_config(cfg, out / "config.yaml")
    if snapshot and result.grid is not None:
        save_snapshot(result.grid, out / "map.tdf")

    degraded = [o for o in result.outputs if o.degraded]
    for o in degraded:
        log.warning("scan %.6f degraded: %s", o.t, o.message)
    if not quiet:
        print(f"{len(result.outputs)} scans, {len(result.keyframes)} keyframes, {len(degraded)} degraded")
        print(report.table())
        if manifest.ground_truth is not None and len(result.outputs) >= 3:
            try:
                ate = evaluate_ate(result.trajectory, read_trajectory(manifest.ground_truth))
                print(f"ATE RMSE: {ate.rmse:.6f} m")
            except TdfOdomError as exc:
                log.warning("ground truth not evaluated: %s", exc)
    return EXIT_OK


def cmd_map(poses_path, scans_path, cfg: PipelineConfig, out_dir, extrinsics: Pose | None = None,
            quiet: bool = False) -> int:
    """Fuse scans at given poses, paired by index; scan ``n`` uses pose ``n``."""
    poses = read_trajectory(poses_path)
    scans = list(read_scans(scans_path, extrinsics))
    if len(poses) < len(scans):
        raise InputError(f"{poses_path}: {len(poses)} poses for {len(scans)} scans")
    if len(poses) > len(scans):
        log.warning("%d poses but %d scans; extra poses ignored", len(poses), len(scans))
    for n, (rec, scan) in enumerate(zip(poses, scans)):
        if abs(rec.t - scan.t_end) > POSE_SCAN_TOLERANCE:
            raise InputError(f"pose {n} at t={rec.t!r} does not match scan {n} ending at {scan.t_end!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = None
    if scans:
        size = np.asarray(cfg.map_size)
        z_off = size[2] / 2.0 if cfg.map_z_offset is None else cfg.map_z_offset
        lower = np.asarray(poses[0].p, dtype=float) - np.array([size[0] / 2.0, size[1] / 2.0, z_off])
        grid = init_grid((lower, lower + size), cfg.resolution, cfg.kernel_bits, cfg.memory_budget)
        kernel = build_kernel(cfg.kernel_radius, cfg.kernel_bits)
        for rec, scan in zip(poses, scans):
            insert_cloud(grid, kernel, rec.pose.apply(scan.points), cfg.workers)
        save_snapshot(grid, out / "map.tdf")
        write_ply(zero_cells(grid), out / "zero_cells.ply")
    if not quiet:
        n_zero = 0 if grid is None else int(np.count_nonzero(grid.cells == 0))
        print(f"fused {len(scans)} scans; {n_zero} occupied cells")
    return EXIT_OK


def cmd_eval(est_path, gt_path, max_dt: float = 0.02, as_json: bool = False) -> int:
    ate = evaluate_ate(read_trajectory(est_path), read_trajectory(gt_path), max_dt)
    if as_json:
        print(json.dumps({"rmse": ate.rmse, "mean": ate.mean, "median": ate.median, "max": ate.max,
                          "pairs": ate.pairs, "axis_rmse": ate.axis_rmse.tolist()}))
        return EXIT_OK
    print(f"ATE RMSE: {ate.rmse:.6f} m")
    print(f"mean {ate.mean:.6f}  median {ate.median:.6f}  max {ate.max:.6f}  pairs {ate.pairs}")
    x, y, z = ate.axis_rmse
    print(f"per-axis RMSE: x {x:.6f}  y {y:.6f}  z {z:.6f}")
    return EXIT_OK


def cmd_bench(cfg: PipelineConfig, points: int = 5000, tiers=bench.DEFAULT_TIERS, json_path=None,
              queries: int = 100_000, registration_sizes=(1000, 5000, 20000), update_points: int = 20_000) -> int:
    report = bench.run_all(tiers, points, cfg.resolution, cfg.kernel_radius, cfg.kernel_bits, cfg.workers,
                           cfg.memory_budget, queries, registration_sizes, update_points)
    print(report.table())
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_export(snapshot_path, out_path, max_distance: float = 0.0) -> int:
    grid = load_snapshot(snapshot_path)
    if max_distance > 0:
        d = popcount(grid.cells) * grid.resolution
        lin = np.flatnonzero(d <= max_distance)
        nx, ny, _ = grid.dims
        ijk = np.stack([lin % nx, (lin // nx) % ny, lin // (nx * ny)], axis=1)
        pts = grid.origin + (ijk + 0.5) * grid.resolution
    else:
        pts = zero_cells(grid)
    write_ply(pts, out_path)
    print(f"wrote {len(pts)} points to {out_path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="tdfodom", description="LiDAR-inertial odometry on binary truncated "
                                "distance fields.", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    r = sub.add_parser("run", help="run odometry over a dataset manifest", epilog=_keys_epilog(),
                       formatter_class=fmt)
    r.add_argument("manifest", type=Path, help="YAML manifest (scans, imu, ground_truth, extrinsics)")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--snapshot", action="store_true", help="also write the final map as map.tdf")
    r.add_argument("-q", "--quiet", action="store_true")
    add_config_arguments(r)

    m = sub.add_parser("map", help="fuse scans at known poses", epilog=_keys_epilog(), formatter_class=fmt)
    m.add_argument("poses", type=Path, help="trajectory file, one pose per scan")
    m.add_argument("scans", type=Path, help="scan directory or concatenated scan log")
    m.add_argument("--out", type=Path, required=True, help="output directory")
    m.add_argument("--extrinsics", nargs=7, type=float, metavar=("TX", "TY", "TZ", "QX", "QY", "QZ", "QW"),
                   help="LiDAR-to-body transform applied to every scan")
    m.add_argument("-q", "--quiet", action="store_true")
    add_config_arguments(m)

    e = sub.add_parser("eval", help="absolute translation error of an estimate against ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("ground_truth", type=Path)
    e.add_argument("--max-dt", type=float, default=0.02, help="association window in seconds (default 0.02)")
    e.add_argument("--json", action="store_true", help="machine-readable output")

    b = sub.add_parser("bench", help="insertion, interpolation and registration microbenchmarks",
                       epilog=_keys_epilog(), formatter_class=fmt)
    b.add_argument("--points", type=int, default=5000, help="cloud size for the insertion tiers")
    b.add_argument("--tiers", type=float, nargs="+", default=list(bench.DEFAULT_TIERS),
                   help="grid sizes in cells (default 1e6 1e7 1e8)")
    b.add_argument("--queries", type=int, default=100_000)
    b.add_argument("--registration-sizes", type=int, nargs="+", default=[1000, 5000, 20000])
    b.add_argument("--update-points", type=int, default=20_000, help="scan size for the update timing")
    b.add_argument("--json", type=Path, dest="json_path", help="also write the report as JSON")
    add_config_arguments(b)

    x = sub.add_parser("export", help="write the zero-distance cells of a snapshot as PLY")
    x.add_argument("snapshot", type=Path)
    x.add_argument("out", type=Path)
    x.add_argument("--max-distance", type=float, default=0.0,
                   help="export every cell within this distance in meters instead")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.manifest, config_from_args(args), args.out, args.snapshot, args.quiet)
        if args.command == "map":
            ext = None if args.extrinsics is None else Pose(args.extrinsics[:3], args.extrinsics[3:])
            return cmd_map(args.poses, args.scans, config_from_args(args), args.out, ext, args.quiet)
        if args.command == "eval":
            return cmd_eval(args.estimate, args.ground_truth, args.max_dt, args.json)
        if args.command == "bench":
            tiers = tuple(int(t) for t in args.tiers)
            return cmd_bench(config_from_args(args), args.points, tiers, args.json_path, args.queries,
                             tuple(args.registration_sizes), args.update_points)
        if args.command == "export":
            return cmd_export(args.snapshot, args.out, args.max_distance)
    except TdfOdomError as exc:
        print(f"tdfodom: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tdfodom: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_INPUT  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
