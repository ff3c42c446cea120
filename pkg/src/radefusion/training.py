"""Training loop, inference, and dataset-level evaluation.

The reference training path is deterministic for a fixed seed: single
torch thread, seeded shuffling, no worker parallelism. Frozen patch
features are cached per frame (the patch encoder never trains), while the
FPN and everything downstream run every step. Per-step loss breakdowns are
written as JSON lines.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig
from .dataio import Box3D, Frame, dataset_manifest, read_frame
from .detection_head import TargetMaps, decode, render_targets
from .errors import DataError, NumericError
from .evaluation import EvalReport, build_report
from .losses import training_loss
from .model import Detector, FrameBatch, frames_to_batch, save_checkpoint

logger = logging.getLogger(__name__)


def set_reference_determinism(seed: int) -> None:
    """Single-threaded seeded torch: the bit-reproducibility contract."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def load_dataset(dataset_dir) -> Tuple[List[Frame], List[str]]:
    """All frames plus their condition tags, in manifest order."""
    entries = dataset_manifest(dataset_dir)
    frames, tags = [], []
    for path, tag in entries:
        frames.append(read_frame(path))
        tags.append(tag)
    return frames, tags


def _cache_patch_features(model: Detector, frames: Sequence[Frame]) -> Optional[List[torch.Tensor]]:
    if not model.uses_camera:
        return None
    cache = []
    with torch.no_grad():
        for f in frames:
            image = torch.from_numpy(f.image).unsqueeze(0)
            cache.append(model.patch_encoder(image).data)
    return cache


def train(cfg: RunConfig, frames: Sequence[Frame], out_dir,
          max_steps: Optional[int] = None) -> Dict:
    """Train a detector on the given frames; writes checkpoints and the loss log.

    Returns a summary dict with step counts, losses, and artifact paths.
    """
    if not frames:
        raise DataError("cannot train on an empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    set_reference_determinism(cfg.seed)

    model = Detector(cfg)
    model.train()
    targets = [render_targets(f.boxes, cfg.grid, cfg.head.sigma) for f in frames]
    patch_cache = _cache_patch_features(model, frames)

    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.optimizer.learning_rate,
        weight_decay=cfg.optimizer.weight_decay,
    )
    n = len(frames)
    bs = min(cfg.optimizer.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = max_steps if max_steps is not None else cfg.optimizer.epochs * steps_per_epoch
    if cfg.optimizer.max_steps is not None:
        total_steps = min(total_steps, cfg.optimizer.max_steps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(total_steps, 1), eta_min=cfg.optimizer.min_lr
    )

    rng = np.random.default_rng(cfg.seed)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    best_loss = float("inf")
    best_state = None
    last_good_state = copy.deepcopy(model.state_dict())
    step = 0
    t0 = time.monotonic()
    first_loss = None
    last_loss = None

    with open(log_path, "w", encoding="utf-8") as log:
        while step < total_steps:
            order = rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                batch = frames_to_batch([frames[i] for i in idx])
                patch = (
                    torch.cat([patch_cache[i] for i in idx]) if patch_cache is not None else None
                )
                head_out = model(batch, patch_features=patch)
                loss, breakdown = training_loss(
                    head_out, [targets[i] for i in idx], cfg.grid, cfg.loss
                )
                if not torch.isfinite(loss):
                    save_checkpoint(model_state_holder(model, last_good_state), final_path,
                                    meta={"aborted_at_step": step})
                    raise NumericError(
                        f"non-finite loss at step {step}; last-good checkpoint "
                        f"written to {final_path}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()

                total = float(loss)
                last_good_state = copy.deepcopy(model.state_dict())
                if first_loss is None:
                    first_loss = total
                last_loss = total
                if total < best_loss:
                    best_loss = total
                    best_state = copy.deepcopy(model.state_dict())
                entry = {"step": step, "total": total, "lr": sched.get_last_lr()[0]}
                entry.update(breakdown)
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                step += 1
                if step >= total_steps:
                    break

    save_checkpoint(model, final_path, meta={"steps": step, "mode": cfg.ablation_mode})
    if best_state is not None:
        save_checkpoint(model_state_holder(model, best_state), best_path,
                        meta={"steps": step, "best_loss": best_loss})
    return {
        "steps": step,
        "first_loss": first_loss,
        "final_loss": last_loss,
        "best_loss": best_loss,
        "seconds": time.monotonic() - t0,
        "log_path": log_path,
        "final_checkpoint": final_path,
        "best_checkpoint": best_path,
        "model": model,
    }


class model_state_holder(torch.nn.Module):
    """Wraps a saved state dict so save_checkpoint can serialize it."""

    def __init__(self, model: torch.nn.Module, state: Dict[str, torch.Tensor]):
        super().__init__()
        self._state = state
        self._keys = list(model.state_dict().keys())

    def state_dict(self):  # noqa: D102 - torch API
        return self._state


def run_inference(model: Detector, frames: Sequence[Frame], cfg: RunConfig,
                  batch_size: int = 8) -> List[List[Box3D]]:
    """Decode detections for every frame, in order."""
    model.eval()
    patch_cache = _cache_patch_features(model, frames)
    out: List[List[Box3D]] = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = list(frames[start : start + batch_size])
            batch = frames_to_batch(chunk)
            patch = (
                torch.cat(patch_cache[start : start + len(chunk)])
                if patch_cache is not None
                else None
            )
            head_out = model(batch, patch_features=patch)
            for i in range(len(chunk)):
                out.append(
                    decode(head_out[i], cfg.grid, cfg.head.score_threshold, cfg.head.top_k)
                )
    return out


def evaluate_detections(dets_per_frame: Sequence[Sequence[Box3D]],
                        frames: Sequence[Frame], tags: Sequence[str],
                        cfg: RunConfig) -> EvalReport:
    ids = [f"frame_{i:05d}" for i in range(len(frames))]
    return build_report(
        dets_by_frame={fid: list(d) for fid, d in zip(ids, dets_per_frame)},
        gts_by_frame={fid: list(f.boxes) for fid, f in zip(ids, frames)},
        tags_by_frame=dict(zip(ids, tags)),
        cfg=cfg.eval,
    )
