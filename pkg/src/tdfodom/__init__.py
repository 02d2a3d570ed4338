"""LiDAR-inertial odometry on binary-mask truncated distance fields."""

from .ate import AteResult, evaluate_ate
from .config import PipelineConfig, load_config
from .dataset import Scan, TrajectoryRecord, read_imu, read_scans, read_trajectory, write_trajectory
from .ekf import EkfNoise, EkfState, ImuSample, InertialEkf, PoseBuffer, PoseMeasurement, predict, update
from .errors import (
    ConfigurationError,
    GridAllocationError,
    InputError,
    InsufficientDataError,
    InsufficientOverlapError,
    ParseError,
    RegistrationError,
    StreamOrderError,
    TdfOdomError,
)
from .pipeline import Pipeline, deskew, keyframe_due, run
from .registration import RegistrationConfig, RegistrationReport, register
from .rotations import Pose
from .tdf import BinaryKernel, TdfGrid, build_kernel, init_grid, insert_cloud, insert_point

__version__ = "0.1.0"
