"""Pipeline configuration: a flat ``key: value`` YAML file plus CLI overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .ekf import EkfNoise
from .errors import ConfigurationError, InputError
from .registration import RegistrationConfig
from .tdf import MASK_WIDTHS


@dataclass
class PipelineConfig:
    # map
    map_size: tuple[float, float, float] = (60.0, 60.0, 25.0)
    resolution: float = 0.05
    map_z_offset: float | None = None
    kernel_radius: int = 20
    kernel_bits: int = 64
    memory_budget: int | None = None
    # keyframes
    t_th: float = 2.0
    q_th: float = 25.0
    # registration
    lam: float = 1.0
    max_iterations: int = 50
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-4
    min_valid_points: int = 100
    # inertial filter
    gyro_noise: float = 1e-3
    accel_noise: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-5
    pos_noise: float = 0.02
    rot_noise_deg: float = 0.5
    vel_noise: float = 0.1
    init_duration: float = 1.0
    # front end
    deskew: bool = True
    downsample: int = 1
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    warmup_scans: int = 5

    def __post_init__(self):
        self.map_size = tuple(float(x) for x in self.map_size)
        if len(self.map_size) != 3 or min(self.map_size) <= 0:
            raise ConfigurationError("map_size needs three positive extents")
        for name in ("resolution", "t_th", "q_th", "lam", "init_duration"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.kernel_bits not in MASK_WIDTHS:
            raise ConfigurationError(f"kernel_bits must be one of {MASK_WIDTHS}")
        if self.kernel_radius < 1 or self.downsample < 1 or self.workers < 1 or self.warmup_scans < 0:
            raise ConfigurationError("kernel_radius, downsample and workers must be >= 1")

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(self.lam, self.max_iterations, self.translation_tolerance,
                                  self.rotation_tolerance, self.min_valid_points)

    def noise(self) -> EkfNoise:
        return EkfNoise(gyro_noise=self.gyro_noise, accel_noise=self.accel_noise,
                        gyro_bias_walk=self.gyro_bias_walk, accel_bias_walk=self.accel_bias_walk,
                        pos_noise=self.pos_noise, rot_noise_deg=self.rot_noise_deg, vel_noise=self.vel_noise)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[FILE_KEYS.get(f.name, f.name)] = list(v) if isinstance(v, tuple) else v
        return out


# file key -> attribute where they differ ("lambda" is a Python keyword)
FILE_KEYS = {"lam": "lambda"}
_ATTR_FOR_KEY = {v: k for k, v in FILE_KEYS.items()}

KEY_HELP = {
    "map_size": "grid extent x y z in meters (default 60 60 25, as used on VIRAL)",
    "resolution": "cell size in meters (default 0.05)",
    "map_z_offset": "height of the initial pose above the grid floor; default: vertical center",
    "kernel_radius": "kernel half-width in cells (default 20 -> 41^3 kernel)",
    "kernel_bits": "mask width in bits: 4, 8, 16, 32 or 64 (default 64)",
    "memory_budget": "max grid bytes; default: available physical memory",
    "t_th": "keyframe translation threshold in meters (default 2.0)",
    "q_th": "keyframe rotation threshold in degrees (default 25)",
    "lambda": "robust-scale factor for the range-dependent Cauchy loss (default 1.0)",
    "max_iterations": "Levenberg-Marquardt iteration cap (default 50)",
    "translation_tolerance": "step size in meters below which registration stops (default 1e-4)",
    "rotation_tolerance": "step size in radians below which registration stops (default 1e-4)",
    "min_valid_points": "minimum in-grid points for a registration (default 100)",
    "gyro_noise": "gyro noise density rad/s/sqrt(Hz) (default 1e-3)",
    "accel_noise": "accelerometer noise density m/s^2/sqrt(Hz) (default 1e-2)",
    "gyro_bias_walk": "gyro bias random walk (default 1e-5)",
    "accel_bias_walk": "accelerometer bias random walk (default 1e-5)",
    "pos_noise": "registration position sigma in meters (default 0.02)",
    "rot_noise_deg": "registration orientation sigma in degrees (default 0.5)",
    "vel_noise": "derived velocity sigma in m/s (default 0.1)",
    "init_duration": "seconds of at-rest IMU data used for gravity alignment (default 1.0)",
    "deskew": "compensate motion inside each scan (default true)",
    "downsample": "keep every n-th point for registration (default 1 = all)",
    "workers": "threads for map insertion (default: host core count)",
    "warmup_scans": "scans excluded from timing statistics (default 5)",
}


def _coerce(attr: str, value):
    current = {f.name: f for f in fields(PipelineConfig)}[attr]
    default = PipelineConfig().__dict__[attr]
    if value is None:
        return None
    if attr == "map_size":
        if isinstance(value, str):
            value = value.replace(",", " ").split()
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"{attr}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int) or attr == "memory_budget":
        return int(float(value))
    if isinstance(default, float) or attr == "map_z_offset":
        return float(value)
    raise ConfigurationError(f"cannot parse {current.name}")  # pragma: no cover


def config_from_mapping(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    values = dict((base or PipelineConfig()).__dict__)
    for key, value in data.items():
        attr = _ATTR_FOR_KEY.get(key, key)
        if attr not in values:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        try:
            values[attr] = _coerce(attr, value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{key}: {exc}") from None
    return PipelineConfig(**values)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the YAML file (if any), then ``overrides``."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file does not exist: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected key/value pairs")
        cfg = config_from_mapping(data, cfg)
    if overrides:
        cfg = config_from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
