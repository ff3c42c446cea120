"""Elevation-weighted lifting of BEV features into a 3D query map.

Each (range, azimuth) bin's elevation power profile from the RAE projection
is mapped by a small MLP to a softmax distribution over E elevation
segments; the BEV feature vector is replicated across segments and scaled
by these weights. Summing the lifted map over segments therefore recovers
the BEV map exactly (mass conservation), which is the defining property of
the weighted lift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch
from torch import nn

from .errors import ConfigError
from .radar_backbone import FeatureMapBEV, _normalize_power


@dataclass
class ElevationWeights:
    """(B, R_f, A_f, E) probability fibers: entries in [0,1], sum over E = 1."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(f"ElevationWeights expects (B, R, A, E), got {tuple(self.data.shape)}")
        sums = self.data.sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
            raise ValueError("elevation weight fibers must sum to 1 over E")


@dataclass
class QueryMap3D:
    """(B, R_f, A_f, C, E) lifted query grid."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ConfigError(f"QueryMap3D expects (B, R, A, C, E), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("QueryMap3D contains non-finite entries")


class ElevationWeightNet(nn.Module):
    """MLP over the raw elevation power profile -> softmax over E segments.

    The raw RAE projection is log-compressed and average-pooled in
    range/azimuth down to the feature resolution; the elevation axis stays
    raw and feeds the MLP. The final layer is zero-initialized so the lift
    starts from a uniform (uninformative) prior.
    """

    def __init__(self, n_elevation_raw: int, n_segments: int, pool_factor: int,
                 hidden: int = 64, per_channel: bool = False):
        super().__init__()
        if per_channel:
            raise ConfigError("per-channel elevation weights are reserved and not implemented")
        self.n_elevation_raw = n_elevation_raw
        self.n_segments = n_segments
        self.pool_factor = pool_factor
        self.mlp = nn.Sequential(
            nn.Linear(n_elevation_raw, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, n_segments),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, p_rae: torch.Tensor) -> ElevationWeights:
        if p_rae.ndim != 4 or p_rae.shape[3] != self.n_elevation_raw:
            raise ConfigError(
                f"p_rae must be (B, R_raw, A_raw, {self.n_elevation_raw}), "
                f"got {tuple(p_rae.shape)}"
            )
        x = _normalize_power(p_rae).permute(0, 3, 1, 2)
        if self.pool_factor > 1:
            x = nn.functional.avg_pool2d(x, self.pool_factor)
        profile = x.permute(0, 2, 3, 1)
        logits = self.mlp(profile)
        return ElevationWeights(data=torch.softmax(logits, dim=-1))


def uniform_weights(batch: int, n_range: int, n_azimuth: int, n_segments: int,
                    dtype=torch.float32, device=None) -> ElevationWeights:
    """Frozen uniform 1/E fibers (the unweighted-lift ablation)."""
    data = torch.full((batch, n_range, n_azimuth, n_segments), 1.0 / n_segments,
                      dtype=dtype, device=device)
    return ElevationWeights(data=data)


def lift(m_bev_rad: Union[FeatureMapBEV, torch.Tensor], w_e: ElevationWeights) -> QueryMap3D:
    """Expand BEV features across elevation segments scaled by the weights.

    q[b, r, a, c, e] = m[b, r, a, c] * w[b, r, a, e]; one weight fiber per
    bin is shared by all channels.
    """
    m = m_bev_rad.data if isinstance(m_bev_rad, FeatureMapBEV) else m_bev_rad
    w = w_e.data
    if m.shape[:3] != w.shape[:3]:
        raise ConfigError(
            f"BEV map {tuple(m.shape)} and weights {tuple(w.shape)} disagree on (B, R, A)"
        )
    return QueryMap3D(data=m.unsqueeze(-1) * w.unsqueeze(-2))
