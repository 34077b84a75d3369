"""Dense optical flow, depth completion and 3D surface velocity from a static camera-LiDAR rig."""

from .energy import EnergyReport, EnergyWeights, total_energy
from .errors import (
    BehindCameraError,
    ConfigError,
    ConvergenceError,
    InvalidDepthError,
    NumericalError,
    ShapeError,
    SurfFlowError,
)
from .geom import CalibratedRig, PointCloud, SparseRangeMap
from .kinematics import SceneFlowFrame, SpeedProfile, lift_to_scene_flow, smooth_flow, speed_profile
from .solver import PairEstimate, SolverConfig, estimate_pair, solve_pair
from .synth import SceneSpec, generate

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CalibratedRig",
    "ConfigError",
    "ConvergenceError",
    "EnergyReport",
    "EnergyWeights",
    "InvalidDepthError",
    "NumericalError",
    "PairEstimate",
    "PointCloud",
    "SceneFlowFrame",
    "SceneSpec",
    "ShapeError",
    "SolverConfig",
    "SparseRangeMap",
    "SpeedProfile",
    "SurfFlowError",
    "estimate_pair",
    "generate",
    "lift_to_scene_flow",
    "smooth_flow",
    "solve_pair",
    "speed_profile",
    "total_energy",
]
