"""Training objective: heatmap focal loss + rotated-box GWD + smooth L1.

The Gaussian-Wasserstein distance models each BEV box as a 2D Gaussian
(mean = center, covariance = quarter-extent ellipse rotated by yaw) and
uses the closed-form 2x2 Wasserstein distance; it supervises center offsets,
footprint dims and yaw jointly. z and the remaining regression channels are
handled by a masked smooth-L1 term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from .dataio import Box3D
from .detection_head import HeadOutput, TargetMaps, decode_bev_at_bins, bev_params
from .errors import ConfigError
from .geometry import GridSpec

_DIM_FLOOR = 1e-6


@dataclass
class LossWeights:
    """Weights of the loss terms plus the GWD normalization constant."""

    w_focal: float = 1.0
    w_gwd: float = 2.0
    w_l1: float = 0.25
    gwd_tau: float = 1.0

    def __post_init__(self):
        if min(self.w_focal, self.w_gwd, self.w_l1) < 0:
            raise ConfigError("loss weights must be non-negative")
        if max(self.w_focal, self.w_gwd, self.w_l1) <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.gwd_tau <= 0:
            raise ConfigError(f"gwd_tau must be positive, got {self.gwd_tau}")


def focal_loss(pred_heatmaps: torch.Tensor, target_heatmaps: torch.Tensor,
               alpha: float = 2.0, beta: float = 4.0, eps: float = 1e-6) -> torch.Tensor:
    """Penalty-reduced Gaussian focal loss, normalized by the GT peak count.

    At target==1 bins: -(1-p)^alpha * log p; elsewhere the background term
    is down-weighted by (1-t)^beta.
    """
    if pred_heatmaps.shape != target_heatmaps.shape:
        raise ConfigError(
            f"shape mismatch: {tuple(pred_heatmaps.shape)} vs {tuple(target_heatmaps.shape)}"
        )
    p = pred_heatmaps.clamp(eps, 1.0 - eps)
    t = target_heatmaps
    pos = (t == 1.0).to(p.dtype)
    neg = 1.0 - pos
    pos_loss = -((1.0 - p) ** alpha) * torch.log(p) * pos
    neg_loss = -((1.0 - t) ** beta) * (p**alpha) * torch.log(1.0 - p) * neg
    n_pos = pos.sum().clamp(min=1.0)
    return (pos_loss.sum() + neg_loss.sum()) / n_pos


def _params_to_gaussian(params: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(…, 5) BEV box params (x, y, l, w, yaw) -> mean (…, 2), cov (…, 2, 2)."""
    mean = params[..., :2]
    l = params[..., 2].clamp(min=_DIM_FLOOR)
    w = params[..., 3].clamp(min=_DIM_FLOOR)
    yaw = params[..., 4]
    c, s = torch.cos(yaw), torch.sin(yaw)
    a = (l / 2.0) ** 2
    b = (w / 2.0) ** 2
    # R diag(a, b) R^T expanded.
    cov = torch.stack(
        [
            torch.stack([a * c * c + b * s * s, (a - b) * s * c], dim=-1),
            torch.stack([(a - b) * s * c, a * s * s + b * c * c], dim=-1),
        ],
        dim=-2,
    )
    return mean, cov


def _as_params(box: Union[Box3D, torch.Tensor], dtype=torch.float64) -> torch.Tensor:
    if isinstance(box, Box3D):
        return bev_params([box], dtype=dtype)[0]
    return box


def box_to_gaussian(box: Union[Box3D, torch.Tensor]) -> Tuple[np.ndarray, np.ndarray]:
    """BEV Gaussian of a box: mean (2,), covariance (2, 2) as float64 arrays."""
    mean, cov = _params_to_gaussian(_as_params(box))
    return mean.numpy(), cov.numpy()


def gwd_distance_sq(params_a: torch.Tensor, params_b: torch.Tensor) -> torch.Tensor:
    """Squared 2-Wasserstein distance between box Gaussians, closed form.

    For 2x2 SPD matrices, Tr((S1^1/2 S2 S1^1/2)^1/2) =
    sqrt(Tr(S1 S2) + 2 sqrt(det S1 det S2)).
    """
    m1, s1 = _params_to_gaussian(params_a)
    m2, s2 = _params_to_gaussian(params_b)
    mean_term = ((m1 - m2) ** 2).sum(dim=-1)
    tr1 = s1[..., 0, 0] + s1[..., 1, 1]
    tr2 = s2[..., 0, 0] + s2[..., 1, 1]
    prod_tr = (s1 * s2).sum(dim=(-1, -2))  # Tr(S1 S2) for symmetric inputs
    det1 = s1[..., 0, 0] * s1[..., 1, 1] - s1[..., 0, 1] ** 2
    det2 = s2[..., 0, 0] * s2[..., 1, 1] - s2[..., 0, 1] ** 2
    cross = torch.sqrt((prod_tr + 2.0 * torch.sqrt((det1 * det2).clamp(min=0.0))).clamp(min=0.0))
    return (mean_term + tr1 + tr2 - 2.0 * cross).clamp(min=0.0)


def gwd_loss(pred_box: Union[Box3D, torch.Tensor], gt_box: Union[Box3D, torch.Tensor],
             tau: float = 1.0) -> torch.Tensor:
    """Normalized GWD loss: 1 - 1 / (tau + ln(1 + d^2)); 0 for identical boxes at tau=1."""
    d2 = gwd_distance_sq(_as_params(pred_box), _as_params(gt_box))
    return (1.0 - 1.0 / (tau + torch.log1p(d2))).mean()


def smooth_l1(pred: torch.Tensor, target: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    """Huber loss (transition 1.0) averaged over masked elements (min 1)."""
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    huber = torch.where(diff < 1.0, 0.5 * diff**2, diff - 0.5)
    m = mask
    while m.ndim < pred.ndim:
        m = m.unsqueeze(-1)
    m = m.expand_as(pred).to(pred.dtype)
    return (huber * m).sum() / m.sum().clamp(min=1.0)


# Regression channels covered by the smooth-L1 term: z, log-dims, sin/cos yaw.
# The bin-offset channels (0, 1) are supervised through the GWD term.
L1_CHANNELS = slice(2, 8)


def total_loss(head_out: HeadOutput,
               target_heatmaps: torch.Tensor,
               target_regression: torch.Tensor,
               fg_mask: torch.Tensor,
               box_pairs: Tuple[torch.Tensor, torch.Tensor],
               weights: LossWeights = LossWeights()) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted sum of the three terms plus a per-term breakdown.

    box_pairs is (pred_params, gt_params), both (N, 5) BEV box parameters;
    predictions are decoded at the ground-truth center bins.
    """
    f = focal_loss(head_out.heatmaps, target_heatmaps)
    pred_params, gt_params = box_pairs
    if pred_params.shape[0] > 0:
        g = (1.0 - 1.0 / (weights.gwd_tau + torch.log1p(
            gwd_distance_sq(pred_params, gt_params)))).mean()
    else:
        g = torch.zeros((), dtype=f.dtype, device=f.device)
    l = smooth_l1(
        head_out.regression[..., L1_CHANNELS],
        target_regression[..., L1_CHANNELS],
        fg_mask,
    )
    total = weights.w_focal * f + weights.w_gwd * g + weights.w_l1 * l
    breakdown = {"focal": float(f.detach()), "gwd": float(g.detach()), "l1": float(l.detach())}
    return total, breakdown


def batch_targets(targets: Sequence[TargetMaps], dtype=torch.float32):
    """Stack per-frame targets for a batch and collect GT bin/box pairings.

    Returns (heat, reg, fg, sample_idx, bins, gt_params) torch tensors.
    """
    heat = torch.from_numpy(np.stack([t.heatmap for t in targets])).to(dtype)
    reg = torch.from_numpy(np.stack([t.regression for t in targets])).to(dtype)
    fg = torch.from_numpy(np.stack([t.fg_mask for t in targets]))
    sample_idx: List[int] = []
    bins: List[np.ndarray] = []
    boxes: List[Box3D] = []
    for i, t in enumerate(targets):
        sample_idx.extend([i] * len(t.boxes))
        bins.append(t.center_bins)
        boxes.extend(t.boxes)
    bins_t = torch.from_numpy(
        np.concatenate(bins, axis=0) if bins else np.zeros((0, 2), dtype=np.int64)
    )
    return heat, reg, fg, torch.tensor(sample_idx, dtype=torch.long), bins_t, bev_params(boxes, dtype)


def training_loss(head_out: HeadOutput, targets: Sequence[TargetMaps], grid: GridSpec,
                  weights: LossWeights = LossWeights()):
    """Convenience wrapper: render box pairs from batched targets and total up."""
    dtype = head_out.heatmaps.dtype
    heat, reg, fg, sample_idx, bins, gt_params = batch_targets(targets, dtype)
    pred_params = decode_bev_at_bins(head_out.regression, sample_idx, bins, grid)
    return total_loss(head_out, heat, reg, fg, (pred_params, gt_params.to(dtype)), weights)
