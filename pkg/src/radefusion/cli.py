"""Operator surface: synth | train | eval | infer | plot-pr.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. All commands take --config (JSON document) or --profile
(desk/paper); --seed and --mode override the loaded config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import ABLATION_MODES, RunConfig, load_config
from .dataio import (
    Box3D,
    OcclusionSpec,
    generate_scene,
    read_frame,
    write_frame,
    write_manifest,
)
from .detection_head import write_detections_jsonl
from .errors import ConfigError, DataError, NumericError, RadeFusionError
from .evaluation import EvalReport
from .geometry import RegionOfInterest
from .model import Detector, load_checkpoint
from .training import evaluate_detections, load_dataset, run_inference, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def cmd_synth(cfg: RunConfig, out_dir, n_frames: int) -> List[dict]:
    """Generate n_frames with sequential seeds and write the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    weights = np.array([c.weight for c in cfg.conditions], dtype=np.float64)
    weights /= weights.sum()
    rng = np.random.default_rng(cfg.seed)
    cond_idx = rng.choice(len(cfg.conditions), size=n_frames, p=weights)
    lo, hi = cfg.n_objects

    entries = []
    for i in range(n_frames):
        cond = cfg.conditions[int(cond_idx[i])]
        n_obj = int(rng.integers(lo, hi + 1))
        frame_seed = cfg.seed + i
        frame = generate_scene(
            frame_seed,
            n_obj,
            cfg.grid,
            cfg.camera,
            OcclusionSpec(mode=cond.occlusion_mode, rng_seed=frame_seed + 7919),
            scene=cfg.scene,
        )
        frame.condition_tag = cond.tag
        name = f"frame_{i:05d}.frame"
        write_frame(frame, os.path.join(out_dir, name))
        entries.append({"path": name, "condition_tag": cond.tag})
    write_manifest(out_dir, entries)
    logger.info("wrote %d frames to %s", n_frames, out_dir)
    return entries


def cmd_train(cfg: RunConfig, dataset_dir, out_dir, max_steps: Optional[int] = None) -> dict:
    frames, _tags = load_dataset(dataset_dir)
    summary = train(cfg, frames, out_dir, max_steps=max_steps)
    logger.info(
        "trained %d steps in %.1fs (final loss %.4f)",
        summary["steps"], summary["seconds"], summary["final_loss"],
    )
    return summary


def cmd_eval(cfg: RunConfig, dataset_dir, checkpoint, out_dir,
             gt_as_dets: bool = False) -> EvalReport:
    frames, tags = load_dataset(dataset_dir)
    if not frames:
        raise DataError(f"test manifest in {dataset_dir} lists no frames")
    if gt_as_dets:
        dets = [list(f.boxes) for f in frames]
    else:
        if checkpoint is None:
            raise ConfigError("eval requires --checkpoint (or --gt-as-dets)")
        model = Detector(cfg)
        load_checkpoint(model, checkpoint)
        dets = run_inference(model, frames, cfg)
    report = evaluate_detections(dets, frames, tags, cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_text())
    return report


def _draw_box(ax, box: Box3D, color: str, lw: float, label: Optional[str] = None):
    corners = box.bev_corners()
    # Plot coordinates: horizontal = -y (left appears left), vertical = x.
    px = -corners[:, 1]
    py = corners[:, 0]
    ax.plot(
        np.append(px, px[0]), np.append(py, py[0]), color=color, linewidth=lw, label=label
    )


def plot_bev_overlay(gt_boxes: Sequence[Box3D], det_boxes: Sequence[Box3D],
                     roi: RegionOfInterest, out_path, size_px=(640, 640)) -> None:
    """BEV overlay: ground truth white, predictions red, ROI dashed."""
    dpi = 100
    fig, ax = plt.subplots(
        figsize=(size_px[0] / dpi, size_px[1] / dpi), dpi=dpi, facecolor="#303030"
    )
    ax.set_facecolor("#303030")
    x0, x1 = roi.x_bounds_m
    y0, y1 = roi.y_bounds_m
    ax.plot(
        [-y0, -y1, -y1, -y0, -y0], [x0, x0, x1, x1, x0],
        color="black", linestyle="--", linewidth=1.2,
    )
    for box in gt_boxes:
        _draw_box(ax, box, "white", 2.5)
    for box in det_boxes:
        _draw_box(ax, box, "red", 1.2)
        cx, cy = -box.center[1], box.center[0]
        ax.text(cx, cy, f"{box.class_name} {box.score:.2f}", color="red", fontsize=6)
    ax.set_xlim(-y1 - 2, -y0 + 2)
    ax.set_ylim(x0 - 2, x1 + 2)
    ax.set_xlabel("-y [m]")
    ax.set_ylabel("x [m]")
    ax.set_aspect("auto")
    fig.tight_layout(pad=0.3)
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)


def cmd_infer(cfg: RunConfig, checkpoint, frame_path, out_dir,
              plot: bool = False) -> List[Box3D]:
    frame = read_frame(frame_path)
    model = Detector(cfg)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
    dets = run_inference(model, [frame], cfg)[0]
    os.makedirs(out_dir, exist_ok=True)
    frame_id = os.path.splitext(os.path.basename(str(frame_path)))[0]
    write_detections_jsonl({frame_id: dets}, os.path.join(out_dir, "detections.jsonl"))
    if plot:
        plot_bev_overlay(
            frame.boxes, dets, cfg.eval.roi,
            os.path.join(out_dir, "overlay.png"), cfg.plot_size_px,
        )
    return dets


def cmd_plot_pr(report_path, out_path, classes: Optional[Sequence[str]] = None,
                conditions: Optional[Sequence[str]] = None):
    """One PR curve per selected (class, condition) cell with stored points."""
    with open(report_path, "r", encoding="utf-8") as f:
        report = json.load(f)
    cells = report["cells"]
    classes = classes or list(cells.keys())
    fig, ax = plt.subplots(figsize=(6, 5))
    n_curves = 0
    for cls in classes:
        if cls not in cells:
            logger.warning("class %r not in report; skipped", cls)
            continue
        conds = conditions or list(cells[cls].keys())
        for cond in conds:
            cell = cells[cls].get(cond)
            if not cell or not cell.get("pr_bev"):
                logger.warning("no PR points for (%s, %s); skipped", cls, cond)
                continue
            ax.plot(
                cell["pr_bev"]["recall"], cell["pr_bev"]["precision"],
                drawstyle="steps-post", label=f"{cls}/{cond}",
            )
            n_curves += 1
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if n_curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return fig


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config, profile=getattr(args, "profile", "desk"))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    mode = getattr(args, "mode", None)
    if mode is not None:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"--mode must be one of {ABLATION_MODES}, got {mode!r}")
        cfg.ablation_mode = mode
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radefusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="config JSON path")
        sp.add_argument("--profile", default="desk", choices=("desk", "paper"))
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--mode", default=None, help="ablation mode override")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=32)

    sp = sub.add_parser("train", help="train a detector")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-steps", type=int, default=None)

    sp = sub.add_parser("eval", help="run inference + evaluation")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt-as-dets", action="store_true")

    sp = sub.add_parser("infer", help="single-frame inference")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--frame", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", action="store_true")

    sp = sub.add_parser("plot-pr", help="PR curves from report.json")
    sp.add_argument("--report", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", nargs="*", default=None)
    sp.add_argument("--conditions", nargs="*", default=None)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            cmd_synth(_load_cfg(args), args.out, args.frames)
        elif args.command == "train":
            cmd_train(_load_cfg(args), args.data, args.out, max_steps=args.max_steps)
        elif args.command == "eval":
            report = cmd_eval(
                _load_cfg(args), args.data, args.checkpoint, args.out,
                gt_as_dets=args.gt_as_dets,
            )
            print(report.to_text())
        elif args.command == "infer":
            dets = cmd_infer(
                _load_cfg(args), args.checkpoint, args.frame, args.out, plot=args.plot
            )
            logger.info("%d detection(s)", len(dets))
        elif args.command == "plot-pr":
            cmd_plot_pr(args.report, args.out, args.classes, args.conditions)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        logger.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except RadeFusionError as e:
        logger.error("%s", e)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
