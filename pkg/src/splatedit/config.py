"""Pipeline configuration: YAML with a strict schema (unknown keys fail)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidParameterError

PRIOR_ENDPOINT_ENV = "SPLATEDIT_PRIOR_ENDPOINT"


class ConfigError(InvalidParameterError):
    """Configuration file is malformed or references missing paths."""


_STAGE_KEYS = {
    "iterations", "lambda_rgb", "lambda_mask", "lambda_sds",
    "lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color",
    "densify_interval", "prune_interval", "densify_grad_threshold",
    "split_scale_percentile", "opacity_prune_threshold",
    "prune_distance_margin", "p_anchor", "geometry_lr_factor",
    "t_min", "t_max", "weight_fn", "guidance_scale",
    "elevation_range", "init_count",
}

_SCHEMA = {
    "scene": None,
    "prompt": None,
    "seed": None,
    "output_dir": None,
    "prior": None,
    "bbox": {"center", "extents", "yaw"},
    "camera": {"width", "height", "fov_degrees", "near", "far"},
    "ring": {"count", "radius", "elevation"},
    "avp": {"rotation_set", "bright_side", "use_foreground_mask"},
    "inpaint": {"rgb", "mask"},
    "coarse": _STAGE_KEYS,
    "enhance": _STAGE_KEYS,
    "compose": {"mode", "gallery_views"},
    "turntable": {"frames"},
}


@dataclass
class PipelineConfig:
    path: Path
    raw: dict

    scene_path: Path = None
    prompt: str = ""
    seed: int = 0
    output_dir: Path = None
    prior: str = "analytic"

    @property
    def bbox_spec(self) -> dict:
        return self.raw.get("bbox", {})

    def section(self, name: str, default=None) -> dict:
        return dict(self.raw.get(name, default if default is not None else {}))


def _check_keys(raw: dict):
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        allowed = _SCHEMA[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a mapping")
            for sub in value:
                raise_if = sub not in allowed
                if raise_if:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})

    if "scene" not in raw:
        raise ConfigError("config requires 'scene'")
    scene_path = (path.parent / raw["scene"]).resolve()
    if not scene_path.exists():
        raise ConfigError(f"scene file not found: {scene_path}")

    ring = raw.get("ring", {})
    if int(ring.get("count", 2)) < 2:
        raise ConfigError("ring.count must be at least 2")

    endpoint = os.environ.get(PRIOR_ENDPOINT_ENV) or raw.get("prior", "analytic")
    out_dir = Path(raw.get("output_dir", "out"))
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir

    return PipelineConfig(
        path=path, raw=raw, scene_path=scene_path,
        prompt=str(raw.get("prompt", "")),
        seed=int(raw.get("seed", 0)),
        output_dir=out_dir,
        prior=str(endpoint),
    )


def bbox_from_config(cfg: PipelineConfig):
    from .scene import BoundingBox

    spec = cfg.bbox_spec
    if not spec:
        raise ConfigError("config requires a 'bbox' section")
    return BoundingBox.from_center_extents(
        np.asarray(spec["center"], dtype=float),
        np.asarray(spec["extents"], dtype=float),
        float(spec.get("yaw", 0.0)))


def camera_spec_from_config(cfg: PipelineConfig) -> dict:
    from .camera import simple_camera

    cam = cfg.section("camera")
    return simple_camera(
        int(cam.get("width", 128)), int(cam.get("height", 128)),
        float(cam.get("fov_degrees", 50.0)),
        near=float(cam.get("near", 0.01)), far=float(cam.get("far", 100.0)))


def stage_from_config(cfg: PipelineConfig, name: str):
    from .guidance import SdsConfig
    from .optim import CameraSampler, Ramp, StageConfig

    section = cfg.section(name)
    bbox = bbox_from_config(cfg)
    ring = cfg.section("ring")
    cam = cfg.section("camera")

    def ramp(value, default):
        v = section.get(value, default)
        if isinstance(v, (list, tuple)):
            return Ramp(float(v[0]), float(v[1]))
        return float(v)

    sds = SdsConfig(
        t_min=int(section.get("t_min", 20)),
        t_max=int(section.get("t_max", 980)),
        weight_fn=str(section.get("weight_fn", "one_minus_alphabar")),
        guidance_scale=float(section.get("guidance_scale", 0.0)),
        seed=cfg.seed)

    elev = section.get("elevation_range", (-10.0, 45.0))
    sampler = CameraSampler(
        center=bbox.center,
        radius=float(ring.get("radius", 2.0 * bbox.extents.max())),
        elevation_range=(float(elev[0]), float(elev[1])),
        width=int(cam.get("width", 128)), height=int(cam.get("height", 128)),
        fov_degrees=float(cam.get("fov_degrees", 50.0)),
        near=float(cam.get("near", 0.01)), far=float(cam.get("far", 100.0)))

    defaults = StageConfig()
    kwargs = dict(
        iterations=int(section.get("iterations",
                                   600 if name == "coarse" else 400)),
        lambda_rgb=ramp("lambda_rgb", [0.2, 1.0]),
        lambda_mask=ramp("lambda_mask", 0.5),
        lambda_sds=ramp("lambda_sds", 0.02),
        sds=sds, camera_sampler=sampler)
    for key in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity",
                "lr_color", "densify_interval", "prune_interval",
                "densify_grad_threshold", "split_scale_percentile",
                "opacity_prune_threshold", "prune_distance_margin",
                "p_anchor", "geometry_lr_factor"):
        if key in section:
            kwargs[key] = type(getattr(defaults, key))(section[key])
    return StageConfig(**kwargs)
