"""Full detector assembly per ablation mode, plus checkpoint archive I/O.

Ablation modes select the computation graph:
  R       radar backbone + head only; camera modules are never constructed.
  R+C     adds lifting with frozen uniform elevation weights, deformable
          cross-attention and gated fusion.
  R+C+W   enables the learned elevation-weight network.
  R+C*+W  like R+C+W but with the alternate vision backend from config.

Checkpoints are a single archive: one JSON manifest line (tensor name ->
shape) followed by the concatenated little-endian float32 payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .cross_attention import DeformableCrossAttention, collapse_elevation
from .dataio import Frame
from .detection_head import DetectionHead, HeadOutput
from .errors import CheckpointError, ConfigError
from .fusion import GatedFusion
from .geometry import CameraModel, reference_points
from .lifting import ElevationWeightNet, lift, uniform_weights
from .radar_backbone import RadarBackbone
from .vision_encoder import FpnUpsampler, PatchFeatureMap, create_patch_encoder

_CKPT_FORMAT = "radefusion-checkpoint"


@dataclass
class FrameBatch:
    """Stacked model inputs for a list of frames sharing one grid."""

    p_rad: torch.Tensor  # (B, R_raw, A_raw, D)
    p_rae: torch.Tensor  # (B, R_raw, A_raw, E_raw)
    image: torch.Tensor  # (B, H, W, 3)
    cameras: List[CameraModel]


def frames_to_batch(frames: Sequence[Frame]) -> FrameBatch:
    return FrameBatch(
        p_rad=torch.from_numpy(np.stack([f.projections.p_rad for f in frames])),
        p_rae=torch.from_numpy(np.stack([f.projections.p_rae for f in frames])),
        image=torch.from_numpy(np.stack([f.image for f in frames])),
        cameras=[f.camera for f in frames],
    )


class Detector(nn.Module):
    """Radar-camera BEV detector wired according to the ablation mode."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.mode = cfg.ablation_mode
        c = cfg.backbone.channels
        self.backbone = RadarBackbone(cfg.backbone)
        self.head = DetectionHead(c, head_channels=cfg.head.head_channels)

        self.uses_camera = self.mode != "R"
        self.uses_weighting = self.mode in ("R+C+W", "R+C*+W")
        if self.uses_camera:
            if self.mode == "R+C*+W":
                backend, seed, path = (
                    cfg.vision.alt_backend,
                    cfg.vision.alt_stub_seed,
                    cfg.vision.alt_external_path,
                )
            else:
                backend, seed, path = cfg.vision.backend, cfg.vision.stub_seed, cfg.vision.external_path
            params = {"patch_size": cfg.vision.patch_size, "c_vit": cfg.vision.c_vit}
            if backend == "stub":
                params["seed"] = seed
            elif backend == "external":
                params["path"] = path
            self.patch_encoder = create_patch_encoder(backend, **params)
            self.fpn = FpnUpsampler(cfg.vision.c_vit, c)
            self.xattn = DeformableCrossAttention(c, cfg.attention)
            self.fusion = GatedFusion(c, cfg.fusion.hidden, cfg.fusion.per_channel)
            if self.uses_weighting:
                self.elevation_net = ElevationWeightNet(
                    cfg.scene.raw_elevation,
                    cfg.grid.n_elevation,
                    cfg.pool_factor,
                    hidden=cfg.lift.hidden,
                    per_channel=cfg.lift.per_channel,
                )
        self._ref_cache: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}

    def reference_points_for(self, cam: CameraModel) -> Tuple[torch.Tensor, torch.Tensor]:
        key = cam.to_json()
        if key not in self._ref_cache:
            pts, mask = reference_points(self.cfg.grid, cam)
            self._ref_cache[key] = (
                torch.from_numpy(pts),
                torch.from_numpy(mask),
            )
        return self._ref_cache[key]

    def forward(self, batch: FrameBatch,
                patch_features: Optional[torch.Tensor] = None) -> HeadOutput:
        """patch_features, when given, bypass the frozen patch encoder
        (legitimate cache: the encoder is frozen by contract)."""
        m_bev = self.backbone(batch.p_rad, batch.p_rae, self.cfg.grid)
        if not self.uses_camera:
            return self.head(m_bev)

        b = batch.p_rad.shape[0]
        grid = self.cfg.grid
        if self.uses_weighting:
            w_e = self.elevation_net(batch.p_rae)
        else:
            w_e = uniform_weights(
                b, grid.n_range, grid.n_azimuth, grid.n_elevation,
                dtype=m_bev.data.dtype, device=m_bev.data.device,
            )
        q3d = lift(m_bev, w_e)

        if patch_features is None:
            patch_features = self.patch_encoder(batch.image).data
        pv = self.fpn(PatchFeatureMap(data=patch_features))

        refs, masks = zip(*(self.reference_points_for(c) for c in batch.cameras))
        ref = torch.stack(refs).to(q3d.data.dtype)
        mask = torch.stack(masks)

        q3d = self.xattn(q3d, pv, ref, mask)
        m_cam = collapse_elevation(q3d)
        m_f = self.fusion(m_bev, m_cam)
        return self.head(m_f)


def save_checkpoint(model: nn.Module, path, meta: Optional[dict] = None) -> None:
    """Write all parameters and buffers as a float32 archive with a manifest."""
    state = model.state_dict()
    names = sorted(state.keys())
    header = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "dtype": "<f4",
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for n in names:
            f.write(np.ascontiguousarray(state[n].detach().cpu().numpy(), dtype="<f4").tobytes())


def load_checkpoint(model: nn.Module, path) -> dict:
    """Load an archive into the model; shapes must match exactly."""
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from e
        if header.get("format") != _CKPT_FORMAT:
            raise CheckpointError(f"{path}: not a {_CKPT_FORMAT} archive")
        state = model.state_dict()
        declared = {d["name"]: tuple(d["shape"]) for d in header["tensors"]}
        expected = {n: tuple(t.shape) for n, t in state.items()}
        if declared != expected:
            missing = sorted(set(expected) - set(declared))
            extra = sorted(set(declared) - set(expected))
            mismatched = sorted(
                n for n in set(declared) & set(expected) if declared[n] != expected[n]
            )
            raise CheckpointError(
                f"{path}: incompatible with model "
                f"(missing={missing[:3]}, extra={extra[:3]}, shape-mismatch={mismatched[:3]})"
            )
        new_state = {}
        for d in header["tensors"]:
            n_items = int(np.prod(d["shape"])) if d["shape"] else 1
            buf = f.read(n_items * 4)
            if len(buf) != n_items * 4:
                raise CheckpointError(f"{path}: payload truncated at tensor {d['name']!r}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(d["shape"]).copy()
            new_state[d["name"]] = torch.from_numpy(arr).to(state[d["name"]].dtype)
    model.load_state_dict(new_state)
    return header.get("meta", {})
