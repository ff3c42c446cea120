"""Synthetic scene generation and the on-disk frame format.

A frame file is a single JSON header line (UTF-8, newline-terminated)
followed by the concatenated little-endian float32 payloads of the tensors
declared in the header, in declaration order. See docs/format.md for the
full layout. The generator is a pure function of (seed, config): the same
arguments always produce a bit-identical Frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DimensionError,
    GenerationError,
    HeaderError,
    ManifestError,
    TruncationError,
)
from .geometry import (
    CameraModel,
    GridSpec,
    RegionOfInterest,
    project_to_image,
    roi_contains,
)

CLASS_NAMES: Tuple[str, ...] = ("Sedan", "BusOrTruck", "Pedestrian", "Motorcycle", "Bicycle")

# BEV footprint colors for rendered camera rectangles, one per class.
CLASS_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.65, 0.15],
        [0.15, 0.25, 0.85],
        [0.85, 0.80, 0.10],
        [0.75, 0.15, 0.80],
    ],
    dtype=np.float32,
)

# Dimension priors (length, width, height) in meters per class.
DIM_PRIORS = np.array(
    [
        [4.5, 1.9, 1.5],
        [8.0, 2.5, 3.0],
        [0.7, 0.7, 1.7],
        [2.2, 0.9, 1.4],
        [1.8, 0.7, 1.3],
    ],
    dtype=np.float64,
)

OCCLUSION_MODES = ("none", "partial", "heavy", "full")
_OCCLUSION_FRACTION = {"none": 0.0, "partial": 0.25, "heavy": 0.75, "full": 1.0}

_FRAME_FORMAT = "radefusion-frame"
_FRAME_VERSION = 1


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass
class Box3D:
    """Rotated 3D bounding box in the ego frame.

    center is the geometric box center; dims are (length, width, height)
    with length along the box x-axis at yaw=0; yaw rotates counter-clockwise
    about ego +z and is normalized to (-pi, pi]. score is 1.0 for ground truth.
    """

    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.dims = tuple(float(v) for v in self.dims)
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be strictly positive, got {self.dims}")
        self.yaw = _wrap_angle(float(self.yaw))
        self.class_id = int(self.class_id)
        if not 0 <= self.class_id < len(CLASS_NAMES):
            raise ValueError(f"class_id out of range: {self.class_id}")
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corners of the BEV footprint, counter-clockwise."""
        l, w = self.dims[0], self.dims[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def z_interval(self) -> Tuple[float, float]:
        h = self.dims[2]
        return self.center[2] - h / 2, self.center[2] + h / 2

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "dims": list(self.dims),
            "yaw": self.yaw,
            "class_id": self.class_id,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(
            center=tuple(d["center"]),
            dims=tuple(d["dims"]),
            yaw=d["yaw"],
            class_id=d["class_id"],
            score=d.get("score", 1.0),
        )


@dataclass
class RadarProjections:
    """Dense radar inputs: range-azimuth-Doppler and range-azimuth-elevation.

    Both tensors hold linear (non-negative) power and share their leading
    range/azimuth dimensions.
    """

    p_rad: np.ndarray
    p_rae: np.ndarray

    def __post_init__(self):
        self.p_rad = np.asarray(self.p_rad, dtype=np.float32)
        self.p_rae = np.asarray(self.p_rae, dtype=np.float32)
        if self.p_rad.ndim != 3 or self.p_rae.ndim != 3:
            raise DimensionError("radar projections must be 3D tensors")
        if self.p_rad.shape[:2] != self.p_rae.shape[:2]:
            raise DimensionError(
                f"range/azimuth dims differ: {self.p_rad.shape[:2]} vs {self.p_rae.shape[:2]}"
            )
        for name, t in (("p_rad", self.p_rad), ("p_rae", self.p_rae)):
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")
            if np.any(t < 0):
                raise ValueError(f"{name} contains negative power")


@dataclass
class OcclusionSpec:
    """Weather-style camera occlusion: overwrite image regions with noise."""

    mode: str = "none"
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in OCCLUSION_MODES:
            raise ValueError(f"occlusion mode must be one of {OCCLUSION_MODES}, got {self.mode!r}")


@dataclass
class Frame:
    """One synchronized radar + camera sample with ground-truth boxes."""

    projections: RadarProjections
    image: np.ndarray
    camera: CameraModel
    boxes: List[Box3D]
    condition_tag: str = "normal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DimensionError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.shape[:2] != tuple(self.camera.image_size):
            raise DimensionError(
                f"image shape {self.image.shape[:2]} does not match camera "
                f"image_size {self.camera.image_size}"
            )


@dataclass
class SceneConfig:
    """Knobs for the synthetic scene generator.

    Raw radar grids share range/azimuth bounds with the feature GridSpec but
    use their own (finer) resolution; the raw elevation axis spans the grid's
    elevation_bounds_m in height bins.
    """

    raw_range: int = 64
    raw_azimuth: int = 32
    n_doppler: int = 16
    raw_elevation: int = 8
    roi: RegionOfInterest = field(default_factory=RegionOfInterest)
    noise_floor: float = 1.0
    blob_amplitude: float = 30.0
    doppler_window_mps: float = 10.0
    ground_z: float = 0.0
    min_range_m: float = 6.0
    max_azimuth_rad: Optional[float] = None
    min_bin_separation: int = 3
    max_retries: int = 100
    dim_jitter: float = 0.15
    min_rect_px: float = 4.0
    # When true, radar blobs and box dimensions are identical across classes
    # so class identity appears only in the camera rendering.
    class_agnostic_radar: bool = False
    shared_dims: Tuple[float, float, float] = (3.0, 1.5, 1.6)


def _rotation2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _spatial_blob(scene: SceneConfig, grid: GridSpec, box: Box3D) -> np.ndarray:
    """Gaussian footprint of a box on the raw range-azimuth grid.

    The BEV covariance of the box (quarter-extent ellipse) is pushed through
    the local Cartesian->polar Jacobian so blob anisotropy encodes yaw and
    extent in bin space.
    """
    x, y, _ = box.center
    r0 = math.hypot(x, y)
    a0 = math.atan2(y, x)
    dr_raw = (grid.range_bounds_m[1] - grid.range_bounds_m[0]) / scene.raw_range
    da_raw = (grid.azimuth_bounds_rad[1] - grid.azimuth_bounds_rad[0]) / scene.raw_azimuth

    l, w = box.dims[0], box.dims[1]
    rot = _rotation2(box.yaw)
    cov_xy = rot @ np.diag([(l / 4.0) ** 2, (w / 4.0) ** 2]) @ rot.T
    jac = np.array([[math.cos(a0), math.sin(a0)], [-math.sin(a0) / r0, math.cos(a0) / r0]])
    scale = np.diag([1.0 / dr_raw, 1.0 / da_raw])
    cov_bins = scale @ jac @ cov_xy @ jac.T @ scale.T
    cov_bins += np.eye(2) * 0.35**2  # keep blobs resolvable for small objects

    cr = (r0 - grid.range_bounds_m[0]) / dr_raw - 0.5
    ca = (a0 - grid.azimuth_bounds_rad[0]) / da_raw - 0.5
    rr = np.arange(scene.raw_range)[:, None] - cr
    aa = np.arange(scene.raw_azimuth)[None, :] - ca
    inv = np.linalg.inv(cov_bins)
    quad = inv[0, 0] * rr**2 + 2.0 * inv[0, 1] * rr * aa + inv[1, 1] * aa**2
    return np.exp(-0.5 * quad)


def _axis_profile(n: int, center: float, sigma: float = 0.8) -> np.ndarray:
    idx = np.arange(n) - center
    return np.exp(-0.5 * (idx / sigma) ** 2)


def _render_box_rect(image: np.ndarray, box: Box3D, cam: CameraModel,
                     scene: SceneConfig) -> Optional[dict]:
    """Fill a perspective-scaled class-colored rectangle; returns render meta."""
    uv = project_to_image(box.center, cam)
    if uv is None:
        return None
    u, v = uv
    p_cam = cam.extrinsics[:3, :3] @ np.asarray(box.center) + cam.extrinsics[:3, 3]
    depth = p_cam[2]
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    l, w, h = box.dims
    x, y, _ = box.center
    # Apparent BEV half-extent perpendicular to the viewing ray.
    rel = box.yaw - math.atan2(y, x)
    half_w = 0.5 * (abs(l * math.sin(rel)) + abs(w * math.cos(rel)))
    hw_px = max(fx * half_w / depth, scene.min_rect_px / 2.0)
    hh_px = max(fy * (h / 2.0) / depth, scene.min_rect_px / 2.0)

    img_h, img_w = image.shape[:2]
    c0, c1 = int(round(u - hw_px)), int(round(u + hw_px))
    r0, r1 = int(round(v - hh_px)), int(round(v + hh_px))
    clipped = c0 < 0 or r0 < 0 or c1 > img_w or r1 > img_h
    cc0, cc1 = max(c0, 0), min(c1, img_w)
    rr0, rr1 = max(r0, 0), min(r1, img_h)
    if cc1 > cc0 and rr1 > rr0:
        image[rr0:rr1, cc0:cc1] = CLASS_COLORS[box.class_id]
    return {
        "center_px": [(c0 + c1) / 2.0, (r0 + r1) / 2.0],
        "projected_px": [u, v],
        "clipped": bool(clipped),
    }


def _apply_occlusion(image: np.ndarray, occlusion: OcclusionSpec) -> None:
    frac = _OCCLUSION_FRACTION[occlusion.mode]
    if frac <= 0.0:
        return
    rng = np.random.default_rng(occlusion.rng_seed)
    h, w = image.shape[:2]
    if frac >= 1.0:
        image[:] = rng.uniform(0.0, 1.0, size=image.shape).astype(np.float32)
        return
    covered = np.zeros((h, w), dtype=bool)
    for _ in range(200):
        if covered.mean() >= frac:
            break
        rh = int(rng.uniform(0.15, 0.45) * h)
        rw = int(rng.uniform(0.15, 0.45) * w)
        r0 = int(rng.integers(0, max(h - rh, 1)))
        c0 = int(rng.integers(0, max(w - rw, 1)))
        image[r0 : r0 + rh, c0 : c0 + rw] = rng.uniform(
            0.0, 1.0, size=(rh, rw, 3)
        ).astype(np.float32)
        covered[r0 : r0 + rh, c0 : c0 + rw] = True


def _place_boxes(rng: np.random.Generator, n_objects: int, grid: GridSpec,
                 scene: SceneConfig, seed: int) -> List[Box3D]:
    boxes: List[Box3D] = []
    taken_bins: List[Tuple[int, int]] = []
    az_lo, az_hi = grid.azimuth_bounds_rad
    if scene.max_azimuth_rad is not None:
        az_lo = max(az_lo, -scene.max_azimuth_rad)
        az_hi = min(az_hi, scene.max_azimuth_rad)
    r_hi = min(grid.range_bounds_m[1], scene.roi.x_bounds_m[1])

    for _ in range(n_objects):
        placed = False
        for _attempt in range(scene.max_retries):
            class_id = int(rng.integers(0, len(CLASS_NAMES)))
            r = rng.uniform(scene.min_range_m, r_hi)
            az = rng.uniform(az_lo, az_hi)
            x, y = r * math.cos(az), r * math.sin(az)
            prior = scene.shared_dims if scene.class_agnostic_radar else DIM_PRIORS[class_id]
            dims = np.asarray(prior) * rng.uniform(
                1.0 - scene.dim_jitter, 1.0 + scene.dim_jitter, size=3
            )
            yaw = rng.uniform(-math.pi, math.pi)
            z = scene.ground_z + dims[2] / 2.0
            box = Box3D(center=(x, y, z), dims=tuple(dims), yaw=yaw, class_id=class_id)
            if not roi_contains(box, scene.roi):
                continue
            rb, ab = grid.bin_coords(r, az)
            bin_pos = (int(round(float(rb))), int(round(float(ab))))
            if not (0 <= bin_pos[0] < grid.n_range and 0 <= bin_pos[1] < grid.n_azimuth):
                continue
            if any(
                max(abs(bin_pos[0] - b[0]), abs(bin_pos[1] - b[1])) < scene.min_bin_separation
                for b in taken_bins
            ):
                continue
            taken_bins.append(bin_pos)
            boxes.append(box)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place object {len(boxes)} after {scene.max_retries} "
                f"retries (seed {seed})"
            )
    return boxes


def generate_scene(rng_seed: int, n_objects: int, grid: GridSpec, cam: CameraModel,
                   occlusion: OcclusionSpec = OcclusionSpec(),
                   scene: Optional[SceneConfig] = None) -> Frame:
    """Generate one deterministic synthetic frame.

    Objects are placed uniformly over the polar coverage inside the ROI with
    class-conditioned dimension priors. Each object deposits an anisotropic
    Gaussian power blob into p_rad (Doppler bin from a sampled radial
    velocity) and p_rae (elevation bin from its height), on top of a positive
    exponential noise floor. The camera image shows a class-colored,
    perspective-scaled rectangle per object; the occlusion mode then
    overwrites image regions with noise.
    """
    scene = scene or SceneConfig()
    rng = np.random.default_rng(rng_seed)

    boxes = _place_boxes(rng, n_objects, grid, scene, rng_seed)
    velocities = rng.uniform(-scene.doppler_window_mps, scene.doppler_window_mps, size=len(boxes))

    p_rad = rng.exponential(scene.noise_floor, size=(scene.raw_range, scene.raw_azimuth, scene.n_doppler))
    p_rae = rng.exponential(scene.noise_floor, size=(scene.raw_range, scene.raw_azimuth, scene.raw_elevation))

    z_lo, z_hi = grid.elevation_bounds_m
    dz_raw = (z_hi - z_lo) / scene.raw_elevation
    for box, vel in zip(boxes, velocities):
        spatial = _spatial_blob(scene, grid, box)
        cd = (vel + scene.doppler_window_mps) / (2 * scene.doppler_window_mps) * scene.n_doppler - 0.5
        ce = (box.center[2] - z_lo) / dz_raw - 0.5
        p_rad += scene.blob_amplitude * spatial[:, :, None] * _axis_profile(scene.n_doppler, cd)
        p_rae += scene.blob_amplitude * spatial[:, :, None] * _axis_profile(scene.raw_elevation, ce)

    h, w = cam.image_size
    image = np.full((h, w, 3), 0.35, dtype=np.float32)
    image += rng.normal(0.0, 0.02, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)

    renders = []
    order = sorted(range(len(boxes)), key=lambda i: -math.hypot(*boxes[i].center[:2]))
    render_by_index: Dict[int, Optional[dict]] = {}
    for i in order:
        render_by_index[i] = _render_box_rect(image, boxes[i], cam, scene)
    renders = [render_by_index[i] for i in range(len(boxes))]

    _apply_occlusion(image, occlusion)

    meta = {
        "seed": int(rng_seed),
        "velocities_mps": [float(v) for v in velocities],
        "renders": renders,
        "occlusion_mode": occlusion.mode,
    }
    return Frame(
        projections=RadarProjections(
            p_rad=p_rad.astype(np.float32), p_rae=p_rae.astype(np.float32)
        ),
        image=image,
        camera=cam,
        boxes=boxes,
        condition_tag="normal",
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Frame file format


def write_frame(frame: Frame, path: str | os.PathLike) -> None:
    """Serialize a frame: JSON header line + raw float32 payloads."""
    tensors = [
        ("p_rad", frame.projections.p_rad),
        ("p_rae", frame.projections.p_rae),
        ("image", frame.image),
    ]
    header = {
        "format": _FRAME_FORMAT,
        "version": _FRAME_VERSION,
        "dtype": "<f4",
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "boxes": [b.to_dict() for b in frame.boxes],
        "camera": frame.camera.to_dict(),
        "condition_tag": frame.condition_tag,
        "meta": frame.meta,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_frame(path: str | os.PathLike) -> Frame:
    """Parse a frame file; raises HeaderError / DimensionError / TruncationError."""
    with open(path, "rb") as f:
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise HeaderError(f"{path}: missing newline-terminated header")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise HeaderError(f"{path}: header is not valid JSON: {e}") from e
        if not isinstance(header, dict) or header.get("format") != _FRAME_FORMAT:
            raise HeaderError(f"{path}: not a {_FRAME_FORMAT} file")
        if header.get("dtype") != "<f4":
            raise HeaderError(f"{path}: unsupported dtype {header.get('dtype')!r}")

        arrays = {}
        for decl in header.get("tensors", []):
            shape = tuple(int(s) for s in decl["shape"])
            if any(s <= 0 for s in shape):
                raise DimensionError(f"{path}: tensor {decl['name']!r} has non-positive dim {shape}")
            n_bytes = int(np.prod(shape)) * 4
            buf = f.read(n_bytes)
            if len(buf) != n_bytes:
                raise TruncationError(
                    f"{path}: payload for {decl['name']!r} truncated "
                    f"({len(buf)} of {n_bytes} bytes)"
                )
            arrays[decl["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    for required in ("p_rad", "p_rae", "image"):
        if required not in arrays:
            raise HeaderError(f"{path}: tensor {required!r} missing from header")
    return Frame(
        projections=RadarProjections(p_rad=arrays["p_rad"], p_rae=arrays["p_rae"]),
        image=arrays["image"],
        camera=CameraModel.from_dict(header["camera"]),
        boxes=[Box3D.from_dict(b) for b in header.get("boxes", [])],
        condition_tag=header.get("condition_tag", ""),
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# Dataset manifest

MANIFEST_NAME = "manifest.json"


def write_manifest(directory: str | os.PathLike, entries: Sequence[dict]) -> None:
    """entries: [{"path": relative frame path, "condition_tag": tag}, ...]."""
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(list(entries), f, sort_keys=True, indent=0)


def dataset_manifest(directory: str | os.PathLike) -> List[Tuple[str, str]]:
    """Ordered (absolute frame path, condition_tag) pairs from manifest.json."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise ManifestError(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            entries = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{manifest_path}: invalid JSON: {e}") from e
    if not isinstance(entries, list):
        raise ManifestError(f"{manifest_path}: manifest must be a JSON list")
    out = []
    for entry in entries:
        path = os.path.join(directory, entry["path"])
        if not os.path.exists(path):
            raise ManifestError(f"manifest references missing file: {path}")
        out.append((path, entry.get("condition_tag", "")))
    return out
