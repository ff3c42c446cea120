"""Center-point detection head on the fused BEV map.

Classification emits one sigmoid heatmap per class at feature-grid
resolution; regression emits 8 channels per bin:
(delta_range_bin, delta_azimuth_bin, z_m, log l, log w, log h,
sin yaw, cos yaw). Targets place an isotropic Gaussian (sigma in BIN
units) at each ground-truth center bin, peak exactly 1.0, combined across
boxes by elementwise max; fractional center positions go into the offset
channels. Decoding picks 3x3 local maxima per class (ties broken by lowest
linear bin index), thresholds, and inverts the parameterization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .dataio import CLASS_NAMES, Box3D
from .errors import ConfigError
from .geometry import GridSpec
from .radar_backbone import FeatureMapBEV

logger = logging.getLogger(__name__)

N_REG_CHANNELS = 8


@dataclass
class HeadOutput:
    """heatmaps (B, R, A, n_classes) in (0,1); regression (B, R, A, 8)."""

    heatmaps: torch.Tensor
    regression: torch.Tensor

    def __post_init__(self):
        if self.heatmaps.ndim != 4 or self.regression.ndim != 4:
            raise ConfigError("HeadOutput tensors must be (B, R, A, C)")
        if self.regression.shape[3] != N_REG_CHANNELS:
            raise ConfigError(
                f"regression must have {N_REG_CHANNELS} channels, got {self.regression.shape[3]}"
            )
        if self.heatmaps.shape[:3] != self.regression.shape[:3]:
            raise ConfigError("heatmap/regression spatial shapes disagree")

    def __getitem__(self, i: int) -> "HeadOutput":
        return HeadOutput(heatmaps=self.heatmaps[i : i + 1], regression=self.regression[i : i + 1])


@dataclass
class TargetMaps:
    """Rendered training targets for one frame.

    heatmap (R, A, n_classes) in [0, 1]; regression (R, A, 8) defined only
    where fg_mask is true (the integer ground-truth center bins).
    """

    heatmap: np.ndarray
    regression: np.ndarray
    fg_mask: np.ndarray
    center_bins: np.ndarray  # (N, 2) int (range-bin, azimuth-bin)
    class_ids: np.ndarray  # (N,)
    boxes: List[Box3D] = field(default_factory=list)
    n_skipped: int = 0


class DetectionHead(nn.Module):
    """Two small conv branches: sigmoid classification + linear regression."""

    def __init__(self, channels: int, n_classes: int = len(CLASS_NAMES),
                 head_channels: Optional[int] = None, heatmap_prior: float = 0.1):
        super().__init__()
        self.n_classes = n_classes
        hc = head_channels or channels
        self.cls_branch = nn.Sequential(
            nn.Conv2d(channels, hc, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hc, n_classes, 1),
        )
        self.reg_branch = nn.Sequential(
            nn.Conv2d(channels, hc, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hc, N_REG_CHANNELS, 1),
        )
        bias = -math.log((1.0 - heatmap_prior) / heatmap_prior)
        nn.init.constant_(self.cls_branch[-1].bias, bias)

    def forward(self, m_f) -> HeadOutput:
        x = (m_f.data if isinstance(m_f, FeatureMapBEV) else m_f).permute(0, 3, 1, 2)
        heat = torch.sigmoid(self.cls_branch(x)).clamp(1e-6, 1.0 - 1e-6)
        reg = self.reg_branch(x)
        return HeadOutput(
            heatmaps=heat.permute(0, 2, 3, 1), regression=reg.permute(0, 2, 3, 1)
        )


def render_targets(gt_boxes: Sequence[Box3D], grid: GridSpec,
                   sigma: float = 0.75, n_classes: int = len(CLASS_NAMES)) -> TargetMaps:
    """Render heatmap + regression targets for one frame's ground truth.

    Boxes whose center bin falls outside the grid are skipped (counted in
    n_skipped). sigma is measured in bins, not meters.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n_r, n_a = grid.n_range, grid.n_azimuth
    heat = np.zeros((n_r, n_a, n_classes), dtype=np.float32)
    reg = np.zeros((n_r, n_a, N_REG_CHANNELS), dtype=np.float32)
    fg = np.zeros((n_r, n_a), dtype=bool)
    bins: List[Tuple[int, int]] = []
    classes: List[int] = []
    kept: List[Box3D] = []
    skipped = 0

    ii = np.arange(n_r)[:, None]
    jj = np.arange(n_a)[None, :]
    for box in gt_boxes:
        x, y, z = box.center
        cr, ca = grid.bin_coords(math.hypot(x, y), math.atan2(y, x))
        cr, ca = float(cr), float(ca)
        bi, bj = int(math.floor(cr + 0.5)), int(math.floor(ca + 0.5))
        if not (0 <= bi < n_r and 0 <= bj < n_a):
            skipped += 1
            continue
        gauss = np.exp(-(((ii - bi) ** 2) + ((jj - bj) ** 2)) / (2.0 * sigma**2))
        np.maximum(heat[:, :, box.class_id], gauss, out=heat[:, :, box.class_id])
        l, w, h = box.dims
        reg[bi, bj] = (
            cr - bi,
            ca - bj,
            z,
            math.log(l),
            math.log(w),
            math.log(h),
            math.sin(box.yaw),
            math.cos(box.yaw),
        )
        fg[bi, bj] = True
        bins.append((bi, bj))
        classes.append(box.class_id)
        kept.append(box)

    if skipped:
        logger.warning("render_targets skipped %d box(es) outside the grid", skipped)
    return TargetMaps(
        heatmap=heat,
        regression=reg,
        fg_mask=fg,
        center_bins=np.asarray(bins, dtype=np.int64).reshape(-1, 2),
        class_ids=np.asarray(classes, dtype=np.int64),
        boxes=kept,
        n_skipped=skipped,
    )


def gaussian_support_area(sigma: float, threshold: float = 0.1) -> float:
    """Area (in bin^2) where the unit-peak isotropic Gaussian exceeds threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return math.pi * 2.0 * sigma**2 * math.log(1.0 / threshold)


def _peak_bins(channel: np.ndarray, threshold: float) -> List[Tuple[int, int]]:
    """3x3 local maxima above threshold; plateau ties keep the lowest linear index."""
    n_r, n_a = channel.shape
    padded = np.full((n_r + 2, n_a + 2), -np.inf)
    padded[1:-1, 1:-1] = channel
    local_max = np.max(
        [padded[di : di + n_r, dj : dj + n_a] for di in range(3) for dj in range(3)], axis=0
    )
    candidates = np.argwhere((channel >= local_max) & (channel > threshold))
    peaks = []
    for bi, bj in candidates:
        lin = bi * n_a + bj
        tie_lost = False
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = bi + di, bj + dj
                if (di or dj) and 0 <= ni < n_r and 0 <= nj < n_a:
                    if channel[ni, nj] == channel[bi, bj] and ni * n_a + nj < lin:
                        tie_lost = True
        if not tie_lost:
            peaks.append((int(bi), int(bj)))
    return peaks


def decode(head_out: HeadOutput, grid: GridSpec, score_threshold: float = 0.3,
           top_k: int = 50) -> List[Box3D]:
    """Decode one frame's head output into scored boxes."""
    if head_out.heatmaps.shape[0] != 1:
        raise ConfigError("decode expects a single-frame HeadOutput (B=1)")
    heat = head_out.heatmaps[0].detach().cpu().numpy()
    reg = head_out.regression[0].detach().cpu().numpy()
    r_lo = grid.range_bounds_m[0]
    a_lo = grid.azimuth_bounds_rad[0]

    boxes: List[Box3D] = []
    for cls in range(heat.shape[2]):
        peaks = _peak_bins(heat[:, :, cls], score_threshold)
        peaks.sort(key=lambda p: (-heat[p[0], p[1], cls], p[0] * heat.shape[1] + p[1]))
        for bi, bj in peaks[:top_k]:
            d = reg[bi, bj]
            rng = r_lo + (bi + float(d[0]) + 0.5) * grid.range_step
            az = a_lo + (bj + float(d[1]) + 0.5) * grid.azimuth_step
            boxes.append(
                Box3D(
                    center=(rng * math.cos(az), rng * math.sin(az), float(d[2])),
                    dims=(math.exp(d[3]), math.exp(d[4]), math.exp(d[5])),
                    yaw=math.atan2(float(d[6]), float(d[7])),
                    class_id=cls,
                    score=float(heat[bi, bj, cls]),
                )
            )
    boxes.sort(key=lambda b: -b.score)
    return boxes


def decode_bev_at_bins(regression: torch.Tensor, sample_idx: torch.Tensor,
                       bins: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Differentiable BEV box params (x, y, l, w, yaw) at given center bins.

    regression: (B, R, A, 8); sample_idx: (N,) batch indices; bins: (N, 2)
    integer (range-bin, azimuth-bin). Used to pair predictions with ground
    truth for the Gaussian-Wasserstein regression term.
    """
    d = regression[sample_idx, bins[:, 0], bins[:, 1]]  # (N, 8)
    cr = bins[:, 0].to(d.dtype) + d[:, 0]
    ca = bins[:, 1].to(d.dtype) + d[:, 1]
    rng = grid.range_bounds_m[0] + (cr + 0.5) * grid.range_step
    az = grid.azimuth_bounds_rad[0] + (ca + 0.5) * grid.azimuth_step
    x = rng * torch.cos(az)
    y = rng * torch.sin(az)
    l = torch.exp(d[:, 3])
    w = torch.exp(d[:, 4])
    yaw = torch.atan2(d[:, 6], d[:, 7])
    return torch.stack([x, y, l, w, yaw], dim=-1)


def bev_params(boxes: Sequence[Box3D], dtype=torch.float32) -> torch.Tensor:
    """(N, 5) tensor of (x, y, l, w, yaw) for ground-truth boxes."""
    if not boxes:
        return torch.zeros((0, 5), dtype=dtype)
    return torch.tensor(
        [[b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw] for b in boxes],
        dtype=dtype,
    )


def write_detections_jsonl(dets_by_frame, path) -> None:
    """One JSON object per detection: frame_id, class, score, center, dims, yaw."""
    import json

    with open(path, "w", encoding="utf-8") as f:
        for frame_id, dets in dets_by_frame.items():
            for d in dets:
                f.write(
                    json.dumps(
                        {
                            "frame_id": frame_id,
                            "class": d.class_name,
                            "score": d.score,
                            "center": list(d.center),
                            "dims": list(d.dims),
                            "yaw": d.yaw,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def read_detections_jsonl(path):
    """Inverse of write_detections_jsonl: {frame_id: [Box3D, ...]}."""
    import json

    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["frame_id"], []).append(
                Box3D(
                    center=tuple(rec["center"]),
                    dims=tuple(rec["dims"]),
                    yaw=rec["yaw"],
                    class_id=CLASS_NAMES.index(rec["class"]),
                    score=rec["score"],
                )
            )
    return out
