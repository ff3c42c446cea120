"""Radar-camera BEV fusion detector on dense RADE-tensor projections."""

from .config import RunConfig, desk_profile, load_config, paper_profile
from .dataio import Box3D, Frame, OcclusionSpec, RadarProjections, generate_scene
from .geometry import CameraModel, GridSpec, PolarCoord, RegionOfInterest
from .model import Detector, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "CameraModel",
    "Detector",
    "Frame",
    "GridSpec",
    "OcclusionSpec",
    "PolarCoord",
    "RadarProjections",
    "RegionOfInterest",
    "RunConfig",
    "desk_profile",
    "generate_scene",
    "load_checkpoint",
    "load_config",
    "paper_profile",
    "save_checkpoint",
    "__version__",
]
