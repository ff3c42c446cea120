"""Perspective-view feature provider: frozen patch encoder + FPN upsampler.

The patch encoder is pluggable: the default "stub" backend is a frozen,
seed-derived random linear projection of each 16x16x3 patch, which keeps
locality and bit-determinism without shipping pretrained weights. Any
backend mapping (B, H, W, 3) images to (B, H/p, W/p, C_vit) patch features
can be registered by name. The upsampler applies two stages of bilinear 2x
interpolation + 3x3 convolution, reducing channels C_vit -> C for a net 4x
spatial gain.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


@dataclass
class PatchFeatureMap:
    """(B, H/patch, W/patch, C_vit) features from the frozen encoder."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(f"PatchFeatureMap expects (B, h, w, C), got {tuple(self.data.shape)}")


@dataclass
class PerspectiveFeatureMap:
    """(B, H/4, W/4, C) upsampled perspective-view features."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(
                f"PerspectiveFeatureMap expects (B, h, w, C), got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise ValueError("PerspectiveFeatureMap contains non-finite entries")


class StubPatchEncoder(nn.Module):
    """Frozen random linear projection of non-overlapping image patches.

    The projection matrix is derived from `seed` with a platform-stable RNG,
    registered as a buffer (never a parameter), so outputs are bit-identical
    across runs and processes and receive no gradient.
    """

    def __init__(self, patch_size: int = 16, c_vit: int = 64, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        self.c_vit = c_vit
        self.seed = seed
        rng = np.random.default_rng(seed)
        in_dim = patch_size * patch_size * 3
        weight = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, c_vit))
        self.register_buffer("weight", torch.from_numpy(weight.astype(np.float32)))

    def forward(self, image: torch.Tensor) -> PatchFeatureMap:
        if image.ndim != 4 or image.shape[3] != 3:
            raise ConfigError(f"image must be (B, H, W, 3), got {tuple(image.shape)}")
        b, h, w, _ = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"image dims ({h}, {w}) must be divisible by patch size {p}")
        patches = (
            image.reshape(b, h // p, p, w // p, p, 3)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, h // p, w // p, p * p * 3)
        )
        return PatchFeatureMap(data=patches @ self.weight)


def _load_external_backend(**kwargs) -> nn.Module:
    """Instantiate an adapter from a "module:factory" path given in config."""
    path = kwargs.pop("path", None)
    if not path or ":" not in path:
        raise ConfigError(
            "external vision backend requires a 'path' of the form 'module:factory'"
        )
    module_name, attr = path.split(":", 1)
    try:
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load external vision backend {path!r}: {e}") from e
    return factory(**kwargs)


_BACKENDS: Dict[str, Callable[..., nn.Module]] = {
    "stub": lambda **kw: StubPatchEncoder(**kw),
    "external": _load_external_backend,
}


def register_backend(name: str, factory: Callable[..., nn.Module]) -> None:
    """Register a patch-encoder backend: factory(**params) -> nn.Module."""
    _BACKENDS[name] = factory


def create_patch_encoder(name: str, **params) -> nn.Module:
    if name not in _BACKENDS:
        raise ConfigError(f"unknown vision backend {name!r}; known: {sorted(_BACKENDS)}")
    return _BACKENDS[name](**params)


class FpnUpsampler(nn.Module):
    """Two 2x bilinear-upsample + 3x3 conv stages, C_vit -> C channels."""

    def __init__(self, c_vit: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_vit, c_out, 3, padding=1)
        self.act = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, patch_map: PatchFeatureMap) -> PerspectiveFeatureMap:
        x = patch_map.data.permute(0, 3, 1, 2)
        x = nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.act(self.conv1(x))
        x = nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv2(x)
        return PerspectiveFeatureMap(data=x.permute(0, 2, 3, 1))
