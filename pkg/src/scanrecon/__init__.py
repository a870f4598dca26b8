"""Target-based reconstruction of multi-pass line-scanner data."""

from scanrecon.core import PointCloud, RigidTransform, ScanPose, apply, compose
from scanrecon.errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    ExternalToolError,
    ReconError,
)

__all__ = [
    "PointCloud",
    "RigidTransform",
    "ScanPose",
    "apply",
    "compose",
    "ReconError",
    "ConfigError",
    "DataError",
    "ConvergenceError",
    "ExternalToolError",
]

__version__ = "0.1.0"
