"""Deformable cross-attention from lifted radar queries onto image features.

Each (range, azimuth, elevation-segment) query predicts a small set of 2D
offsets around its projected reference point, bilinearly samples the
perspective-view feature map there, aggregates the samples with softmax
weights, and adds the projected result residually to the query. Queries
whose reference point does not project into the image pass through
untouched, so an all-invalid frame degrades to radar-only features.

Offset and output-projection heads are zero-initialized: the first forward
pass samples exactly at the reference points and applies a zero update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from torch import nn

from .errors import ConfigError
from .lifting import QueryMap3D
from .radar_backbone import FeatureMapBEV
from .vision_encoder import PerspectiveFeatureMap


@dataclass
class DeformAttnConfig:
    """Sampling layout: points per query, heads, offset bound, layer count."""

    n_points: int = 4
    n_heads: int = 1
    offset_scale: float = 0.1
    n_layers: int = 1
    proj_bias: bool = False

    def __post_init__(self):
        if self.n_points < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise ConfigError("n_points, n_heads and n_layers must all be >= 1")
        if not 0.0 < self.offset_scale <= 1.0:
            raise ConfigError(f"offset_scale must be in (0, 1], got {self.offset_scale}")


@dataclass
class SampledFeatures:
    """(B, R, A, E, n_points, C) per-point samples, zero where mask is false."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 6:
            raise ConfigError(
                f"SampledFeatures expects (B, R, A, E, P, C), got {tuple(self.data.shape)}"
            )


def bilinear_sample(pv_map: Union[PerspectiveFeatureMap, torch.Tensor],
                    points: torch.Tensor,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Bilinearly interpolate a (B, H, W, C) map at normalized 2D points.

    points are (B, ..., 2) with (u, v) in [0, 1]^2 mapped so the center of
    cell (i, j) sits at ((j + 0.5)/W, (i + 0.5)/H); locations outside the
    grid contribute zero (zero padding). mask (B, ...) forces exact zeros
    where false. Returns (B, ..., C).
    """
    pv = pv_map.data if isinstance(pv_map, PerspectiveFeatureMap) else pv_map
    if pv.ndim != 4:
        raise ConfigError(f"pv_map must be (B, H, W, C), got {tuple(pv.shape)}")
    b, h, w, c = pv.shape
    lead = points.shape[1:-1]
    # grid_sample with align_corners=False maps grid value g to pixel
    # ((g + 1) * size - 1) / 2, so g = 2u - 1 lands at u * size - 0.5:
    # exactly the cell-center convention documented above.
    grid = points.reshape(b, -1, 1, 2).to(pv.dtype) * 2.0 - 1.0
    sampled = nn.functional.grid_sample(
        pv.permute(0, 3, 1, 2), grid, mode="bilinear",
        padding_mode="zeros", align_corners=False,
    )  # (B, C, N, 1)
    out = sampled[..., 0].permute(0, 2, 1)
    if mask is not None:
        out = out * mask.reshape(b, -1, 1).to(out.dtype)
    return out.reshape((b,) + lead + (c,))


class DeformableCrossAttentionLayer(nn.Module):
    """One offset-predict / sample / aggregate / residual-update step."""

    def __init__(self, channels: int, cfg: DeformAttnConfig):
        super().__init__()
        if channels % cfg.n_heads != 0:
            raise ConfigError(f"channels {channels} not divisible by n_heads {cfg.n_heads}")
        self.cfg = cfg
        self.channels = channels
        self.offset_head = nn.Linear(channels, cfg.n_heads * cfg.n_points * 2)
        self.logit_head = nn.Linear(channels, cfg.n_heads * cfg.n_points)
        self.out_proj = nn.Linear(channels, channels, bias=cfg.proj_bias)
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        nn.init.zeros_(self.logit_head.weight)
        nn.init.zeros_(self.logit_head.bias)
        nn.init.zeros_(self.out_proj.weight)
        if cfg.proj_bias:
            nn.init.zeros_(self.out_proj.bias)

    def predict_offsets(self, queries: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(..., C) query vectors -> offsets (..., heads, points, 2) in
        normalized image units, bounded by tanh to offset_scale, and raw
        attention logits (..., heads, points)."""
        cfg = self.cfg
        raw = self.offset_head(queries)
        offsets = torch.tanh(raw).reshape(raw.shape[:-1] + (cfg.n_heads, cfg.n_points, 2))
        offsets = offsets * cfg.offset_scale
        logits = self.logit_head(queries).reshape(raw.shape[:-1] + (cfg.n_heads, cfg.n_points))
        return offsets, logits

    def forward(self, q3d: torch.Tensor, pv: torch.Tensor, ref_points: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        """q3d (B,R,A,C,E), pv (B,H,W,C), ref_points (R,A,E,2) or (B,R,A,E,2),
        mask matching ref_points' leading shape. Returns the updated q3d."""
        cfg = self.cfg
        b, n_r, n_a, c, n_e = q3d.shape
        queries = q3d.permute(0, 1, 2, 4, 3)  # (B, R, A, E, C)
        if ref_points.ndim == 4:
            ref_points = ref_points.unsqueeze(0).expand(b, -1, -1, -1, -1)
            mask = mask.unsqueeze(0).expand(b, -1, -1, -1)
        ref_points = ref_points.to(q3d.dtype)

        offsets, logits = self.predict_offsets(queries)
        # (B, R, A, E, heads, points, 2)
        pts = ref_points.unsqueeze(-2).unsqueeze(-2) + offsets
        weights = torch.softmax(logits, dim=-1)
        point_mask = mask.unsqueeze(-1).unsqueeze(-1).expand(
            -1, -1, -1, -1, cfg.n_heads, cfg.n_points
        )

        ch = c // cfg.n_heads
        head_feats = []
        for hd in range(cfg.n_heads):
            feat = bilinear_sample(
                pv[..., hd * ch : (hd + 1) * ch],
                pts[..., hd, :, :],
                point_mask[..., hd, :],
            )  # (B, R, A, E, points, ch)
            head_feats.append((weights[..., hd, :, None] * feat).sum(dim=-2))
        agg = torch.cat(head_feats, dim=-1)  # (B, R, A, E, C)

        update = self.out_proj(agg)
        updated = torch.where(mask.unsqueeze(-1), queries + update, queries)
        return updated.permute(0, 1, 2, 4, 3)

    def sample(self, pv: torch.Tensor, ref_points: torch.Tensor,
               mask: torch.Tensor, batch: int) -> SampledFeatures:
        """Reference-point samples without offsets (single-head inspection aid)."""
        if ref_points.ndim == 4:
            ref_points = ref_points.unsqueeze(0).expand(batch, -1, -1, -1, -1)
            mask = mask.unsqueeze(0).expand(batch, -1, -1, -1)
        pts = ref_points.unsqueeze(-2).expand(-1, -1, -1, -1, self.cfg.n_points, -1)
        m = mask.unsqueeze(-1).expand(-1, -1, -1, -1, self.cfg.n_points)
        return SampledFeatures(data=bilinear_sample(pv, pts.to(pv.dtype), m))


class DeformableCrossAttention(nn.Module):
    """Stack of deformable cross-attention layers over one PV feature level."""

    def __init__(self, channels: int, cfg: DeformAttnConfig = DeformAttnConfig()):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            DeformableCrossAttentionLayer(channels, cfg) for _ in range(cfg.n_layers)
        )

    def predict_offsets(self, queries: torch.Tensor):
        return self.layers[0].predict_offsets(queries)

    def forward(self, m_q3d: Union[QueryMap3D, torch.Tensor],
                pv_map: Union[PerspectiveFeatureMap, torch.Tensor],
                ref_points: torch.Tensor, mask: torch.Tensor) -> QueryMap3D:
        x = m_q3d.data if isinstance(m_q3d, QueryMap3D) else m_q3d
        pv = pv_map.data if isinstance(pv_map, PerspectiveFeatureMap) else pv_map
        if x.shape[3] != pv.shape[3]:
            raise ConfigError(
                f"query channels {x.shape[3]} must match PV channels {pv.shape[3]}"
            )
        if ref_points.shape[-1] != 2 or ref_points.shape[-4:-1] != (x.shape[1], x.shape[2], x.shape[4]):
            raise ConfigError(
                f"ref_points {tuple(ref_points.shape)} do not match query grid "
                f"({x.shape[1]}, {x.shape[2]}, {x.shape[4]}, 2)"
            )
        for layer in self.layers:
            x = layer(x, pv, ref_points, mask)
        return QueryMap3D(data=x)


def collapse_elevation(m_q3d: Union[QueryMap3D, torch.Tensor]) -> FeatureMapBEV:
    """Arithmetic mean over the elevation axis -> camera-refined BEV map."""
    x = m_q3d.data if isinstance(m_q3d, QueryMap3D) else m_q3d
    return FeatureMapBEV(data=x.mean(dim=-1))
