"""Dual-encoder radar backbone producing the BEV feature map.

The RAD and RAE projections are encoded independently (their Doppler and
elevation axes enter as 2D-convolution input channels, so no 3D convolutions
are needed), concatenated along channels, and refined by a residual trunk at
constant resolution. All public tensors are batched channel-last:
(B, n_range, n_azimuth, channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
from torch import nn

from .errors import ConfigError
from .geometry import GridSpec


@dataclass
class FeatureMapBEV:
    """BEV feature grid (B, n_range_f, n_azimuth_f, channels), finite entries."""

    data: torch.Tensor
    grid: Optional[GridSpec] = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(f"FeatureMapBEV expects (B, R, A, C), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("FeatureMapBEV contains non-finite entries")


@dataclass
class BackboneConfig:
    """Encoder/trunk layout; exact depths are configuration, not contract.

    stage_channels and downsample describe the per-stage widths and stride
    factors of each encoder stem; the product of downsample factors is the
    raw-to-feature resolution ratio and must divide the raw grid dims.
    The last stage width must equal channels // 2 (the two encoder streams
    concatenate to `channels`).
    """

    n_doppler: int = 16
    n_elevation_raw: int = 8
    channels: int = 32
    stage_channels: Tuple[int, ...] = (16,)
    downsample: Tuple[int, ...] = (2,)
    n_trunk_blocks: int = 4

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ConfigError(f"channels must be even, got {self.channels}")
        if len(self.stage_channels) != len(self.downsample):
            raise ConfigError("stage_channels and downsample must have equal length")
        if self.stage_channels[-1] != self.channels // 2:
            raise ConfigError(
                f"last stage width {self.stage_channels[-1]} must equal channels/2 "
                f"= {self.channels // 2}"
            )

    @property
    def total_downsample(self) -> int:
        out = 1
        for d in self.downsample:
            out *= d
        return out


def _norm(channels: int) -> nn.Module:
    groups = 1
    for g in (8, 4, 2):
        if channels % g == 0:
            groups = g
            break
    return nn.GroupNorm(groups, channels)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + x)


class _EncoderStem(nn.Module):
    """Stride-2 stages folding the spectral axis into conv channels."""

    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        layers = []
        prev = in_channels
        for width, stride in zip(cfg.stage_channels, cfg.downsample):
            layers += [
                nn.Conv2d(prev, width, 3, stride=stride, padding=1),
                _norm(width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                _norm(width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _normalize_power(p: torch.Tensor) -> torch.Tensor:
    """log1p compression followed by per-sample standardization.

    Radar power spans decades; compression plus standardization keeps the
    encoders scale-stable. All-zero inputs map to all-zero outputs.
    """
    x = torch.log1p(p)
    dims = tuple(range(1, x.ndim))
    mean = x.mean(dim=dims, keepdim=True)
    std = x.std(dim=dims, keepdim=True)
    return (x - mean) / (std + 1e-6)


class RadarBackbone(nn.Module):
    """Independent RAD/RAE encoders + concatenation + residual fusion trunk."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.rad_stem = _EncoderStem(cfg.n_doppler, cfg)
        self.rae_stem = _EncoderStem(cfg.n_elevation_raw, cfg)
        self.trunk = nn.Sequential(*[_ResidualBlock(cfg.channels) for _ in range(cfg.n_trunk_blocks)])

    def _check_input(self, p: torch.Tensor, name: str, spectral: int) -> None:
        if p.ndim != 4:
            raise ConfigError(f"{name} must be (B, R_raw, A_raw, {spectral}), got {tuple(p.shape)}")
        if p.shape[3] != spectral:
            raise ConfigError(f"{name} spectral axis must be {spectral}, got {p.shape[3]}")
        ds = self.cfg.total_downsample
        if p.shape[1] % ds or p.shape[2] % ds:
            raise ConfigError(
                f"{name} spatial dims {tuple(p.shape[1:3])} not divisible by "
                f"total downsample factor {ds}"
            )

    def encode_rad(self, p_rad: torch.Tensor) -> torch.Tensor:
        """(B, R_raw, A_raw, D) linear power -> (B, R_f, A_f, C/2)."""
        self._check_input(p_rad, "p_rad", self.cfg.n_doppler)
        x = _normalize_power(p_rad).permute(0, 3, 1, 2)
        return self.rad_stem(x).permute(0, 2, 3, 1)

    def encode_rae(self, p_rae: torch.Tensor) -> torch.Tensor:
        """(B, R_raw, A_raw, E_raw) linear power -> (B, R_f, A_f, C/2)."""
        self._check_input(p_rae, "p_rae", self.cfg.n_elevation_raw)
        x = _normalize_power(p_rae).permute(0, 3, 1, 2)
        return self.rae_stem(x).permute(0, 2, 3, 1)

    def forward(self, p_rad: torch.Tensor, p_rae: torch.Tensor,
                grid: Optional[GridSpec] = None) -> FeatureMapBEV:
        f_rad = self.encode_rad(p_rad)
        f_rae = self.encode_rae(p_rae)
        if f_rad.shape[:3] != f_rae.shape[:3]:
            raise ConfigError(
                f"encoder outputs disagree: {tuple(f_rad.shape)} vs {tuple(f_rae.shape)}"
            )
        x = torch.cat([f_rad, f_rae], dim=3).permute(0, 3, 1, 2)
        x = self.trunk(x).permute(0, 2, 3, 1)
        return FeatureMapBEV(data=x, grid=grid)
