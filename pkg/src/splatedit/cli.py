"""Pipeline CLI: avp | lift | enhance | compose | render.

Exit codes: 0 success, 1 config error, 2 degenerate data,
3 external-prior failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import ply
from .anchor import (DEFAULT_ROTATION_SET, AzimuthRing, brightness_ratio,
                     propose_anchor, sample_ring, score_views, value_channel)
from .camera import look_at
from .config import (ConfigError, PipelineConfig, bbox_from_config,
                     camera_spec_from_config, load_config, stage_from_config)
from .errors import (DegenerateInputError, GuidanceUnavailableError,
                     InvalidParameterError)
from .guidance import invert_depth
from .imgio import (image_grid, load_color_png, load_mask_png, project_bbox_mask,
                    psnr, save_color_png, save_mask_png)
from .optim import AnchorTarget, init_sphere, run_coarse, run_enhance
from .priors import AnalyticGaussianPrior, ZeroControlProvider
from .renderer import render
from .scene import TAG_OBJECT, Scene, excise_bbox, merge_scenes


def _save_unit_png16(image, path):
    from PIL import Image
    arr = np.clip(np.asarray(image) * 65535.0 + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _ring_cameras(cfg: PipelineConfig):
    bbox = bbox_from_config(cfg)
    ring_cfg = cfg.section("ring")
    ring = AzimuthRing(center=bbox.center,
                       radius=float(ring_cfg.get("radius",
                                                 2.0 * bbox.extents.max())),
                       elevation_degrees=float(ring_cfg.get("elevation", 15.0)),
                       count=int(ring_cfg.get("count", 100)))
    return ring, sample_ring(ring, **camera_spec_from_config(cfg))


def _make_prior(cfg: PipelineConfig, mean_image):
    if cfg.prior == "analytic":
        return AnalyticGaussianPrior(mean=mean_image)
    from .remote import RemotePrior
    host, _, port = cfg.prior.rpartition(":")
    return RemotePrior(host or "127.0.0.1", int(port))


def _load_anchor_target(cfg: PipelineConfig) -> AnchorTarget:
    report_path = cfg.output_dir / "avp_report.json"
    if not report_path.exists():
        raise ConfigError(f"missing AVP report {report_path}; run 'avp' first")
    report = json.loads(report_path.read_text())
    cam = look_at(report["camera"]["position"], report["camera"]["target"],
                  **camera_spec_from_config(cfg))
    inpaint = cfg.section("inpaint")
    if "rgb" not in inpaint or "mask" not in inpaint:
        raise ConfigError("config requires inpaint.rgb and inpaint.mask")
    rgb = load_color_png(cfg.path.parent / inpaint["rgb"])
    mask = (load_mask_png(cfg.path.parent / inpaint["mask"]) > 0.5).astype(float)
    if rgb.shape[:2] != (cam.height, cam.width):
        raise ConfigError("inpainted image resolution does not match export")
    return AnchorTarget(camera=cam, foreground_rgb=rgb, foreground_mask=mask)


def _turntable(scene: Scene, cfg: PipelineConfig, frames: int) -> np.ndarray:
    bbox = bbox_from_config(cfg)
    ring_cfg = cfg.section("ring")
    ring = AzimuthRing(center=bbox.center,
                       radius=float(ring_cfg.get("radius",
                                                 2.0 * bbox.extents.max())),
                       elevation_degrees=float(ring_cfg.get("elevation", 15.0)),
                       count=max(frames, 2))
    cams = sample_ring(ring, **camera_spec_from_config(cfg))
    return [render(scene, cam).color for cam in cams[:frames]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_avp(cfg: PipelineConfig, bright_side: str) -> int:
    scene = ply.load_scene(cfg.scene_path)
    bbox = bbox_from_config(cfg)
    ring, cams = _ring_cameras(cfg)
    avp_cfg = cfg.section("avp")
    rotation_set = tuple(float(r) for r in avp_cfg.get(
        "rotation_set", DEFAULT_ROTATION_SET))
    bright = avp_cfg.get("bright_side", bright_side or "right")

    outputs = [render(scene, cam) for cam in cams]
    views = list(zip(cams, outputs))
    fg_masks = None
    if avp_cfg.get("use_foreground_mask", True):
        fg_masks = [project_bbox_mask(bbox, cam) for cam in cams]

    scores = score_views(views, rotation_set, fg_masks, bright)
    anchor = propose_anchor(views, rotation_set, fg_masks, bright)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    step = ring.azimuth_step_degrees
    rows = []
    curve = []
    for i, score in enumerate(scores):
        mask = None if fg_masks is None else fg_masks[i]
        ratio0 = brightness_ratio(value_channel(outputs[i].color), 0.0,
                                  mask, rotation_set)
        curve.append(ratio0)
        if score is not None:
            rows.append([score.view_index, i * step, f"{score.ratio:.6f}",
                         f"{score.contrast:.6f}", score.best_rotation])
    _write_csv(cfg.output_dir / "avp_scores.csv", rows,
               ["view_index", "azimuth_deg", "ratio", "contrast",
                "best_rotation"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(np.arange(len(curve)) * step, curve)
    ax.axvline(anchor.view_index * step, color="r", linestyle="--",
               label=f"anchor (view {anchor.view_index})")
    ax.set_xlabel("azimuth (deg)")
    ax.set_ylabel("left/right brightness ratio")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(cfg.output_dir / "avp_ratio_curve.png")
    plt.close(fig)

    out = outputs[anchor.view_index]
    cam = cams[anchor.view_index]
    save_color_png(out.color, cfg.output_dir / "anchor_render.png")
    bbox_mask = project_bbox_mask(bbox, cam)
    save_mask_png(bbox_mask, cfg.output_dir / "anchor_bbox_mask.png")
    _save_unit_png16(invert_depth(out.normalized_depth),
                     cfg.output_dir / "anchor_depth_inverted.png")

    report = {
        "anchor_index": anchor.view_index,
        "azimuth_deg": anchor.view_index * step,
        "ratio": anchor.ratio,
        "contrast": anchor.contrast,
        "best_rotation": anchor.best_rotation,
        "camera": {"position": cam.position.tolist(),
                   "target": bbox.center.tolist()},
    }
    (cfg.output_dir / "avp_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True))
    print(f"anchor view {anchor.view_index} "
          f"(azimuth {anchor.view_index * step:.1f} deg, "
          f"contrast {anchor.contrast:.4f})")
    return 0


def cmd_lift(cfg: PipelineConfig) -> int:
    target = _load_anchor_target(cfg)
    bbox = bbox_from_config(cfg)
    stage = stage_from_config(cfg, "coarse")
    count = int(cfg.section("coarse").get("init_count", 800))
    obj = init_sphere(count, bbox.center, 0.5 * float(bbox.extents.max()),
                      seed=cfg.seed)
    obj.bbox = bbox
    prior = _make_prior(cfg, target.foreground_rgb)

    history = []
    result = run_coarse(obj, target, stage, prior, seed=cfg.seed,
                        history=history)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ply.save_scene(result, cfg.output_dir / "object.ply")
    _write_csv(cfg.output_dir / "lift_losses.csv",
               [[h["iteration"], h["rgb"], h["mask"], h["sds"]]
                for h in history],
               ["iteration", "rgb", "mask", "sds"])

    frames = int(cfg.section("turntable").get("frames", 8))
    strip = np.concatenate(_turntable(result, cfg, frames), axis=1)
    save_color_png(strip, cfg.output_dir / "lift_turntable.png")

    out = render(result, target.camera)
    metrics = {
        "anchor_psnr_db": psnr(out.color, target.foreground_rgb,
                               target.foreground_mask),
        "mask_mae": float(np.abs(out.mask - target.foreground_mask).mean()),
        "splat_count": len(result),
    }
    (cfg.output_dir / "lift_metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True))
    print(f"lift done: {len(result)} splats, "
          f"anchor PSNR {metrics['anchor_psnr_db']:.2f} dB")
    return 0


def cmd_enhance(cfg: PipelineConfig, object_path: Path | None) -> int:
    target = _load_anchor_target(cfg)
    bbox = bbox_from_config(cfg)
    scene = ply.load_scene(cfg.scene_path)
    background = excise_bbox(scene, bbox)
    object_path = object_path or cfg.output_dir / "object.ply"
    obj = ply.load_scene(object_path).retagged(TAG_OBJECT)
    obj.bbox = bbox
    stage = stage_from_config(cfg, "enhance")

    inpaint = cfg.section("inpaint")
    full_rgb = load_color_png(cfg.path.parent / inpaint["rgb"])
    base_prior = _make_prior(cfg, full_rgb)

    before = render(merge_scenes(background, obj), target.camera)
    history = []
    result = run_enhance(obj, background, target, stage, base_prior,
                         ZeroControlProvider(), prompt=cfg.prompt,
                         seed=cfg.seed, history=history)
    after = render(merge_scenes(background, result), target.camera)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ply.save_scene(result, cfg.output_dir / "object_enhanced.ply")
    save_color_png(np.concatenate([before.color, after.color], axis=1),
                   cfg.output_dir / "enhance_before_after.png")
    _write_csv(cfg.output_dir / "enhance_losses.csv",
               [[h["iteration"], h["rgb"], h["mask"], h["di_sds"]]
                for h in history],
               ["iteration", "rgb", "mask", "di_sds"])
    obj_render = render(result, target.camera)
    metrics = {
        "anchor_psnr_db": psnr(obj_render.color, target.foreground_rgb,
                               target.foreground_mask),
        "mask_mae": float(np.abs(obj_render.mask
                                 - target.foreground_mask).mean()),
        "splat_count": len(result),
    }
    (cfg.output_dir / "enhance_metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True))
    print(f"enhance done: anchor PSNR {metrics['anchor_psnr_db']:.2f} dB")
    return 0


def cmd_compose(cfg: PipelineConfig, object_path: Path | None) -> int:
    bbox = bbox_from_config(cfg)
    scene = ply.load_scene(cfg.scene_path)
    compose_cfg = cfg.section("compose")
    mode = compose_cfg.get("mode", "replace")
    if mode not in ("replace", "insert"):
        raise ConfigError("compose.mode must be 'replace' or 'insert'")
    background = excise_bbox(scene, bbox) if mode == "replace" else scene

    object_path = object_path or cfg.output_dir / "object_enhanced.ply"
    if not Path(object_path).exists():
        object_path = cfg.output_dir / "object.ply"
    obj = ply.load_scene(object_path).retagged(TAG_OBJECT)
    obj.bbox = bbox

    final = merge_scenes(background, obj)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ply.save_scene(final, cfg.output_dir / "scene_edited.ply")

    n_views = int(compose_cfg.get("gallery_views", 6))
    images = _turntable(final, cfg, n_views)
    columns = int(np.ceil(np.sqrt(n_views)))
    save_color_png(image_grid(images, columns),
                   cfg.output_dir / "compose_gallery.png")
    print(f"composed scene: {len(final)} splats "
          f"({len(background)} background + {len(obj)} object)")
    return 0


def cmd_render(cfg: PipelineConfig) -> int:
    scene = ply.load_scene(cfg.scene_path)
    _, cams = _ring_cameras(cfg)
    frames = int(cfg.section("turntable").get("frames", 8))
    idx = np.linspace(0, len(cams), frames, endpoint=False).astype(int)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    for k, i in enumerate(idx):
        out = render(scene, cams[i])
        save_color_png(out.color, cfg.output_dir / f"render_{k:03d}.png")
    print(f"wrote {frames} renders to {cfg.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatedit",
        description="Localized 3D Gaussian Splatting editing pipeline")
    parser.add_argument("command",
                        choices=["avp", "lift", "enhance", "compose", "render"])
    parser.add_argument("--config", required=True, help="YAML config path")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--bright-side", choices=["left", "right"],
                        default=None)
    parser.add_argument("--object", default=None,
                        help="object PLY path (enhance/compose)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config,
                          overrides={"seed": args.seed, "output_dir": args.out})
        if args.command == "avp":
            return cmd_avp(cfg, args.bright_side)
        if args.command == "lift":
            return cmd_lift(cfg)
        if args.command == "enhance":
            return cmd_enhance(cfg, Path(args.object) if args.object else None)
        if args.command == "compose":
            return cmd_compose(cfg, Path(args.object) if args.object else None)
        return cmd_render(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DegenerateInputError as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return 2
    except GuidanceUnavailableError as exc:
        print(f"prior unavailable: {exc}", file=sys.stderr)
        return 3
    except InvalidParameterError as exc:
        print(f"invalid parameter: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
