"""Gated residual fusion of radar-only and camera-refined BEV maps.

A per-bin MLP on the concatenated features emits a sigmoid gate that forms
an elementwise convex combination of the two maps, so the fused map always
lies inside the envelope of its inputs and the model can fall back to pure
radar when the camera is uninformative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch
from torch import nn

from .errors import ConfigError
from .radar_backbone import FeatureMapBEV


@dataclass
class GateMap:
    """(B, R_f, A_f, C) gate values, strictly inside (0, 1)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(f"GateMap expects (B, R, A, C), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("GateMap contains non-finite entries")
        if torch.any(self.data <= 0) or torch.any(self.data >= 1):
            raise ValueError("gate values must lie strictly in (0, 1)")


def _unwrap(m: Union[FeatureMapBEV, torch.Tensor]) -> torch.Tensor:
    return m.data if isinstance(m, FeatureMapBEV) else m


class GatedFusion(nn.Module):
    """Two-layer gate MLP + convex combination.

    The gate is per-channel by default (C outputs per bin); per_channel=False
    selects the scalar-per-bin variant, broadcast across channels. The final
    layer is zero-initialized so an untrained gate is exactly 0.5 everywhere
    (the arithmetic mean of the two maps) while remaining trainable.
    """

    def __init__(self, channels: int, hidden: Optional[int] = None, per_channel: bool = True):
        super().__init__()
        self.channels = channels
        self.per_channel = per_channel
        hidden = hidden or channels
        out = channels if per_channel else 1
        self.mlp = nn.Sequential(
            nn.Linear(2 * channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, out),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def gate(self, m_bev_rad: Union[FeatureMapBEV, torch.Tensor],
             m_bev_cam: Union[FeatureMapBEV, torch.Tensor]) -> GateMap:
        rad, cam = _unwrap(m_bev_rad), _unwrap(m_bev_cam)
        if rad.shape != cam.shape:
            raise ConfigError(f"shape mismatch: {tuple(rad.shape)} vs {tuple(cam.shape)}")
        logits = self.mlp(torch.cat([rad, cam], dim=-1))
        # Clamp: float32 sigmoid saturates to exactly 0/1 for large logits,
        # which would break the open-interval contract.
        gamma = torch.sigmoid(logits).clamp(1e-6, 1.0 - 1e-6)
        if not self.per_channel:
            gamma = gamma.expand_as(rad)
        return GateMap(data=gamma)

    def forward(self, m_bev_rad: Union[FeatureMapBEV, torch.Tensor],
                m_bev_cam: Union[FeatureMapBEV, torch.Tensor]) -> FeatureMapBEV:
        gamma = self.gate(m_bev_rad, m_bev_cam)
        return fuse(m_bev_rad, m_bev_cam, gamma)


def fuse(m_bev_rad: Union[FeatureMapBEV, torch.Tensor],
         m_bev_cam: Union[FeatureMapBEV, torch.Tensor],
         gamma: Union[GateMap, torch.Tensor]) -> FeatureMapBEV:
    """Elementwise convex combination: gamma * rad + (1 - gamma) * cam."""
    rad, cam = _unwrap(m_bev_rad), _unwrap(m_bev_cam)
    g = gamma.data if isinstance(gamma, GateMap) else gamma
    if rad.shape != cam.shape or g.shape != rad.shape:
        raise ConfigError(
            f"shape mismatch: rad {tuple(rad.shape)}, cam {tuple(cam.shape)}, "
            f"gate {tuple(g.shape)}"
        )
    grid = m_bev_rad.grid if isinstance(m_bev_rad, FeatureMapBEV) else None
    return FeatureMapBEV(data=g * rad + (1.0 - g) * cam, grid=grid)
