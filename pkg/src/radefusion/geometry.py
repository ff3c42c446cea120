"""Coordinate-frame algebra for the radar-camera detector.

Conventions used throughout the package:

Ego frame (right-handed):
  - Origin at the radar sensor, x forward, y left, z up.
  - Azimuth is measured in the horizontal plane, counter-clockwise from
    +x (so +azimuth points toward +y). Elevation is measured from the
    horizontal plane toward +z.

Camera frame (right-handed, standard computer vision):
  - x right, y down, z forward along the optical axis.
  - Extrinsics are a 4x4 rigid transform mapping ego/radar points into
    the camera frame: p_cam = R @ p_ego + t.

Image frame:
  - Continuous pixel coordinates (u, v) with u rightward, v downward.
  - A point is inside the image iff 0 <= u < W and 0 <= v < H.

Polar radar grid:
  - Bin i of an axis with bounds (lo, hi) and n bins covers
    [lo + i*d, lo + (i+1)*d), d = (hi - lo) / n, with its center at
    lo + (i + 0.5)*d. Fractional bin coordinates map a physical value v
    to (v - lo)/d - 0.5 so bin centers land on integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from .errors import ConfigError

if TYPE_CHECKING:
    from .dataio import Box3D


@dataclass(frozen=True)
class PolarCoord:
    """A point in radar polar coordinates (range, azimuth, elevation angle)."""

    range_m: float
    azimuth_rad: float
    elevation_rad: float

    def __post_init__(self):
        if self.range_m < 0:
            raise ValueError(f"range must be >= 0, got {self.range_m}")
        if abs(self.azimuth_rad) > math.pi / 2 + 1e-12:
            raise ValueError(f"azimuth outside [-pi/2, pi/2]: {self.azimuth_rad}")
        if abs(self.elevation_rad) > math.pi / 2 + 1e-12:
            raise ValueError(f"elevation outside [-pi/2, pi/2]: {self.elevation_rad}")


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics, radar-to-camera extrinsics, image size.

    intrinsics: 3x3 upper-triangular matrix with positive focal lengths.
    extrinsics: 4x4 rigid transform from the ego/radar frame to the camera
        frame; the rotation block must be orthonormal with determinant +1.
    image_size: (height_px, width_px).
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        k = self.intrinsics
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
            raise ConfigError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        r = self.extrinsics[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ConfigError("extrinsics rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ConfigError("extrinsics rotation must have determinant +1")
        if not np.allclose(self.extrinsics[3], [0, 0, 0, 1], atol=1e-12):
            raise ConfigError("extrinsics last row must be [0, 0, 0, 1]")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        self.image_size = (int(h), int(w))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics.reshape(-1)],
            "extrinsics": [float(v) for v in self.extrinsics.reshape(-1)],
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            intrinsics=np.asarray(d["intrinsics"], dtype=np.float64).reshape(3, 3),
            extrinsics=np.asarray(d["extrinsics"], dtype=np.float64).reshape(4, 4),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        )

    @classmethod
    def from_json(cls, s: str) -> "CameraModel":
        return cls.from_dict(json.loads(s))


@dataclass
class GridSpec:
    """Feature-grid geometry: range/azimuth bins plus elevation segments.

    n_range and n_azimuth are the feature-map resolution; n_elevation is the
    number of lifted elevation segments E. Elevation segments are defined in
    ego-frame height z (meters), linearly spaced over elevation_bounds_m.
    """

    n_range: int
    n_azimuth: int
    n_elevation: int
    range_bounds_m: Tuple[float, float]
    azimuth_bounds_rad: Tuple[float, float]
    elevation_bounds_m: Tuple[float, float]

    def __post_init__(self):
        if min(self.n_range, self.n_azimuth, self.n_elevation) < 1:
            raise ConfigError("grid counts must all be >= 1")
        for name, (lo, hi) in (
            ("range_bounds_m", self.range_bounds_m),
            ("azimuth_bounds_rad", self.azimuth_bounds_rad),
            ("elevation_bounds_m", self.elevation_bounds_m),
        ):
            if not hi > lo:
                raise ConfigError(f"{name} must be strictly increasing, got ({lo}, {hi})")

    @property
    def range_step(self) -> float:
        lo, hi = self.range_bounds_m
        return (hi - lo) / self.n_range

    @property
    def azimuth_step(self) -> float:
        lo, hi = self.azimuth_bounds_rad
        return (hi - lo) / self.n_azimuth

    def range_centers(self) -> np.ndarray:
        lo, _ = self.range_bounds_m
        return lo + (np.arange(self.n_range) + 0.5) * self.range_step

    def azimuth_centers(self) -> np.ndarray:
        lo, _ = self.azimuth_bounds_rad
        return lo + (np.arange(self.n_azimuth) + 0.5) * self.azimuth_step

    def elevation_centers(self) -> np.ndarray:
        lo, hi = self.elevation_bounds_m
        step = (hi - lo) / self.n_elevation
        return lo + (np.arange(self.n_elevation) + 0.5) * step

    def bin_coords(self, range_m, azimuth_rad) -> Tuple[np.ndarray, np.ndarray]:
        """Fractional (range-bin, azimuth-bin) coordinates; bin centers map to integers."""
        r = (np.asarray(range_m) - self.range_bounds_m[0]) / self.range_step - 0.5
        a = (np.asarray(azimuth_rad) - self.azimuth_bounds_rad[0]) / self.azimuth_step - 0.5
        return r, a


@dataclass
class RegionOfInterest:
    """Evaluation volume in ego coordinates; membership is closed-interval."""

    x_bounds_m: Tuple[float, float] = (0.0, 72.0)
    y_bounds_m: Tuple[float, float] = (-6.4, 6.4)
    z_bounds_m: Tuple[float, float] = (-2.0, 6.0)

    def __post_init__(self):
        for name, (lo, hi) in (
            ("x_bounds_m", self.x_bounds_m),
            ("y_bounds_m", self.y_bounds_m),
            ("z_bounds_m", self.z_bounds_m),
        ):
            if not hi > lo:
                raise ConfigError(f"{name} must be strictly increasing, got ({lo}, {hi})")


def polar_to_cartesian(p: PolarCoord) -> Tuple[float, float, float]:
    """Ego-frame (x, y, z) of a polar point."""
    ce = math.cos(p.elevation_rad)
    x = p.range_m * ce * math.cos(p.azimuth_rad)
    y = p.range_m * ce * math.sin(p.azimuth_rad)
    z = p.range_m * math.sin(p.elevation_rad)
    return x, y, z


def cartesian_to_polar(x: float, y: float, z: float) -> PolarCoord:
    """Inverse of polar_to_cartesian on the valid angle ranges.

    Raises ValueError for the origin (direction undefined) and for points
    behind the radar plane (x < 0), which have no azimuth in [-pi/2, pi/2].
    """
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise ValueError("cannot convert the origin to polar coordinates")
    az = math.atan2(y, x)
    el = math.atan2(z, math.hypot(x, y))
    return PolarCoord(r, az, el)


def polar_grid_to_cartesian(range_m: np.ndarray, azimuth_rad: np.ndarray,
                            z_m: np.ndarray) -> np.ndarray:
    """Vectorized BEV polar -> ego (x, y, z) with height given directly.

    range/azimuth describe the horizontal (BEV) position; z is the ego
    height of the point. Shapes broadcast; returns (..., 3).
    """
    r = np.asarray(range_m, dtype=np.float64)
    a = np.asarray(azimuth_rad, dtype=np.float64)
    z = np.asarray(z_m, dtype=np.float64)
    x = r * np.cos(a)
    y = r * np.sin(a)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project_to_image(point_radar_xyz, cam: CameraModel) -> Optional[Tuple[float, float]]:
    """Project an ego-frame point to continuous pixel coordinates.

    Returns None when the point is at or behind the camera plane (depth <= 0)
    or the projected pixel falls outside the image; out-of-frustum is a
    normal empty result, not an error.
    """
    p = np.asarray(point_radar_xyz, dtype=np.float64).reshape(3)
    p_cam = cam.extrinsics[:3, :3] @ p + cam.extrinsics[:3, 3]
    if p_cam[2] <= 0:
        return None
    uvw = cam.intrinsics @ p_cam
    u = uvw[0] / uvw[2]
    v = uvw[1] / uvw[2]
    h, w = cam.image_size
    if not (0.0 <= u < w and 0.0 <= v < h):
        return None
    return float(u), float(v)


def project_points(points_xyz: np.ndarray, cam: CameraModel):
    """Vectorized projection of (..., 3) ego points.

    Returns (uv, valid): uv is (..., 2) continuous pixel coordinates
    (undefined where invalid), valid marks depth > 0 and in-image pixels.
    """
    pts = np.asarray(points_xyz, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    p_cam = flat @ cam.extrinsics[:3, :3].T + cam.extrinsics[:3, 3]
    depth = p_cam[:, 2]
    front = depth > 0
    safe_depth = np.where(front, depth, 1.0)
    uvw = p_cam @ cam.intrinsics.T
    uv = uvw[:, :2] / safe_depth[:, None]
    h, w = cam.image_size
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    valid = front & inside
    return uv.reshape(pts.shape[:-1] + (2,)), valid.reshape(pts.shape[:-1])


def reference_points(grid: GridSpec, cam: CameraModel):
    """Per-(range, azimuth, elevation-segment) projected reference points.

    Each query bin center is lifted to 3D at its elevation-segment height,
    projected into the image, and normalized by image width/height. Returns
    (points, mask): points (n_range, n_azimuth, n_elevation, 2) in [0,1]^2
    where mask is true, mask false where the projection is empty.
    """
    r = grid.range_centers()[:, None, None]
    a = grid.azimuth_centers()[None, :, None]
    z = grid.elevation_centers()[None, None, :]
    pts = polar_grid_to_cartesian(r, a, z)
    uv, valid = project_points(pts, cam)
    h, w = cam.image_size
    norm = uv / np.array([w, h], dtype=np.float64)
    norm = np.where(valid[..., None], norm, 0.0)
    return norm.astype(np.float32), valid


def roi_contains(box: "Box3D", roi: RegionOfInterest) -> bool:
    """True iff the box center lies inside all three closed ROI intervals."""
    x, y, z = box.center
    return (
        roi.x_bounds_m[0] <= x <= roi.x_bounds_m[1]
        and roi.y_bounds_m[0] <= y <= roi.y_bounds_m[1]
        and roi.z_bounds_m[0] <= z <= roi.z_bounds_m[1]
    )
