"""Coarse-to-fine contextual 3D lifting.

Sphere initialization, the coarse anchor-fitting loop (rgb + mask + 3D-aware
SDS), gradient-driven densification and pruning, and the enhancement loop
driven by depth-guided inpainting SDS over the merged background+object
scene. Only object-tagged splats are ever updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, look_at, simple_camera
from .errors import DivergenceError, InvalidParameterError
from .guidance import (SdsConfig, di_sds_grad, sds_grad_3d,
                       view_conditioned_prompt)
from .imgio import project_bbox_mask
from .priors import ConditionBundle
from .renderer import SplatGradients, render, render_backward
from .scene import (TAG_OBJECT, BoundingBox, Scene, inverse_sigmoid,
                    merge_scenes, normalize_quaternions,
                    quaternions_to_matrices, rgb_to_dc)


@dataclass(frozen=True)
class Ramp:
    """Piecewise-linear weight schedule hitting both endpoints exactly."""

    start: float
    end: float

    def value(self, iteration: int, total: int) -> float:
        if total <= 1:
            return self.end
        f = iteration / (total - 1)
        return self.start + (self.end - self.start) * f


def _as_ramp(value) -> Ramp:
    if isinstance(value, Ramp):
        return value
    return Ramp(float(value), float(value))


@dataclass
class CameraSampler:
    """Random azimuth/elevation samples on a sphere around a center."""

    center: np.ndarray
    radius: float
    elevation_range: tuple = (-10.0, 45.0)
    width: int = 64
    height: int = 64
    fov_degrees: float = 50.0
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def sample(self, rng: np.random.Generator) -> Camera:
        az = rng.uniform(0.0, 360.0)
        el = rng.uniform(*self.elevation_range)
        pos = self.center + self.radius * np.array([
            np.cos(np.deg2rad(el)) * np.cos(np.deg2rad(az)),
            np.cos(np.deg2rad(el)) * np.sin(np.deg2rad(az)),
            np.sin(np.deg2rad(el))])
        return look_at(pos, self.center, **simple_camera(
            self.width, self.height, self.fov_degrees,
            near=self.near, far=self.far))


@dataclass
class StageConfig:
    iterations: int = 600
    lambda_rgb: Ramp | float = field(default_factory=lambda: Ramp(0.2, 1.0))
    lambda_mask: Ramp | float = 0.5
    lambda_sds: Ramp | float = 0.02
    lr_position: float = 5e-3
    lr_rotation: float = 5e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2e-2
    densify_interval: int = 100
    prune_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_scale_percentile: float = 75.0
    opacity_prune_threshold: float = 0.02
    prune_distance_margin: float = 1.5
    p_anchor: float = 0.25
    geometry_lr_factor: float = 0.1  # applied in the enhancement stage
    sds: SdsConfig = field(default_factory=SdsConfig)
    camera_sampler: CameraSampler | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be non-negative")
        for name in ("lambda_rgb", "lambda_mask", "lambda_sds"):
            ramp = _as_ramp(getattr(self, name))
            if ramp.start < 0 or ramp.end < 0:
                raise InvalidParameterError(f"{name} must be non-negative")
            setattr(self, name, ramp)


@dataclass
class AnchorTarget:
    """Ground truth at the proposed anchor view: the inpainted foreground
    image and its mask."""

    camera: Camera
    foreground_rgb: np.ndarray
    foreground_mask: np.ndarray

    def __post_init__(self):
        self.foreground_rgb = np.asarray(self.foreground_rgb, dtype=np.float64)
        self.foreground_mask = np.asarray(self.foreground_mask, dtype=np.float64)
        if not (self.foreground_mask > 0.5).any():
            raise InvalidParameterError("anchor target mask is empty")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter-group Adam with standard bias correction."""

    def __init__(self, scene: Scene, lrs: dict, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {}
        self._v = {}
        for name in self.lrs:
            arr = getattr(scene, name)
            self._m[name] = np.zeros_like(arr)
            self._v[name] = np.zeros_like(arr)

    GRAD_FIELDS = {
        "positions": "positions", "rotations": "rotations",
        "log_scales": "log_scales", "opacity_logits": "opacity_logits",
        "colors_dc": "colors_dc",
    }

    def step(self, scene: Scene, grads: SplatGradients,
             update_mask: np.ndarray | None = None) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, lr in self.lrs.items():
            if lr == 0.0:
                continue
            g = getattr(grads, self.GRAD_FIELDS[name])
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            delta = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            target = getattr(scene, name)
            if update_mask is not None:
                delta = delta * (update_mask if delta.ndim == 1
                                 else update_mask[:, None])
            target -= delta
        # keep the quaternion invariant after every step (skip when the
        # rotation group is frozen so frozen geometry stays bit-identical)
        if self.lrs.get("rotations", 0.0) != 0.0:
            scene.rotations[:] = normalize_quaternions(scene.rotations)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def init_sphere(count: int, center, radius: float, seed: int = 0) -> Scene:
    """Object-tagged splats filling a solid ball, with opacity falling off
    as a Gaussian of center distance; colors and opacity start low so
    stray points fade instead of becoming floaters."""
    if count <= 0 or radius <= 0:
        raise InvalidParameterError("init_sphere: count and radius must be > 0")
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)

    direc = rng.normal(size=(count, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    positions = center + direc * r[:, None]

    o_max = 0.1
    opacity = o_max * np.exp(-r ** 2 / (2.0 * (radius / 3.0) ** 2))
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    iso_scale = radius * count ** (-1.0 / 3.0)

    scene = Scene(
        positions=positions,
        rotations=quats,
        log_scales=np.full((count, 3), np.log(iso_scale)),
        opacity_logits=inverse_sigmoid(opacity),
        colors_dc=np.tile(rgb_to_dc([0.1, 0.1, 0.1]), (count, 1)),
        tags=np.full(count, TAG_OBJECT, dtype=np.uint8),
        bbox=BoundingBox(center - radius, center + radius),
    )
    return scene


def coarse_losses(obj: Scene, target: AnchorTarget, sample_cam: Camera,
                  prior_3d, stage: StageConfig, iteration: int = 0,
                  rng: np.random.Generator | None = None):
    """Eq-style coarse objective: masked anchor rgb MSE, full-frame mask MSE,
    and the 3D-aware SDS term at the sampled view. Returns (losses, grads)."""
    if len(obj) == 0:
        raise InvalidParameterError("coarse_losses: empty object scene")
    lam_rgb = stage.lambda_rgb.value(iteration, stage.iterations)
    lam_mask = stage.lambda_mask.value(iteration, stage.iterations)
    lam_sds = stage.lambda_sds.value(iteration, stage.iterations)

    out_a = render(obj, target.camera)
    fg = target.foreground_mask > 0.5
    n_fg = max(int(fg.sum()), 1)
    diff = (out_a.color - target.foreground_rgb) * fg[..., None]
    loss_rgb = float((diff ** 2).sum() / (3 * n_fg))
    grad_color = lam_rgb * 2.0 * diff / (3 * n_fg)

    mdiff = out_a.mask - target.foreground_mask
    loss_mask = float((mdiff ** 2).mean())
    grad_mask = lam_mask * 2.0 * mdiff / mdiff.size

    grads = render_backward(obj, target.camera, out_a,
                            grad_color=grad_color, grad_mask=grad_mask)

    loss_sds = 0.0
    if lam_sds > 0.0 and prior_3d is not None:
        out_s = out_a if sample_cam is target.camera \
            else render(obj, sample_cam)
        rel = _relative_pose(sample_cam, target.camera)
        g = sds_grad_3d(prior_3d, out_s.color, target.foreground_rgb, rel,
                        stage.sds, rng=rng)
        loss_sds = float(np.abs(g).mean())  # proxy; SDS has no scalar loss
        grads += render_backward(obj, sample_cam, out_s,
                                 grad_color=lam_sds * g)

    losses = {"rgb": loss_rgb, "mask": loss_mask, "sds": loss_sds,
              "total": lam_rgb * loss_rgb + lam_mask * loss_mask}
    return losses, grads


def _relative_pose(camera: Camera, anchor: Camera):
    def spherical(cam):
        p = cam.position
        rad = np.linalg.norm(p)
        az = np.degrees(np.arctan2(p[1], p[0]))
        el = np.degrees(np.arcsin(np.clip(p[2] / max(rad, 1e-12), -1, 1)))
        return az, el, rad

    az_c, el_c, r_c = spherical(camera)
    az_a, el_a, r_a = spherical(anchor)
    d_az = (az_c - az_a + 180.0) % 360.0 - 180.0
    return (d_az, el_c - el_a, r_c - r_a)


def densify_and_prune(obj: Scene, grad_stats: np.ndarray,
                      stage: StageConfig) -> Scene:
    """Split/clone splats with large accumulated positional gradients, prune
    near-transparent splats and distant floaters."""
    if len(obj) == 0:
        return obj.copy()
    grad_stats = np.asarray(grad_stats, dtype=np.float64).reshape(-1)
    if len(grad_stats) != len(obj):
        raise InvalidParameterError("grad_stats length mismatch")

    scales = obj.scales
    max_scale = scales.max(axis=1)
    size_threshold = np.percentile(max_scale, stage.split_scale_percentile)
    hot = grad_stats > stage.densify_grad_threshold
    split_sel = hot & (max_scale >= size_threshold)
    clone_sel = hot & ~split_sel

    parts = [obj]
    keep = np.ones(len(obj), dtype=bool)
    if split_sel.any():
        idx = np.flatnonzero(split_sel)
        sub = obj.select(idx)
        axis_k = np.argmax(sub.scales, axis=1)
        rot = quaternions_to_matrices(sub.unit_rotations)
        axes = rot[np.arange(len(idx)), :, axis_k]
        offset = 0.5 * sub.scales[np.arange(len(idx)), axis_k][:, None] * axes
        children = []
        for sign in (1.0, -1.0):
            child = sub.copy()
            child.positions += sign * offset
            child.log_scales -= np.log(1.6)
            children.append(child)
        keep[idx] = False  # parents replaced by their two children
        parts = [obj.select(np.flatnonzero(keep))] + children
    if clone_sel.any():
        parts.append(obj.select(np.flatnonzero(clone_sel)))

    merged = parts[0]
    for p in parts[1:]:
        merged = merge_scenes(merged, p)
    merged.tags[:] = TAG_OBJECT

    # pruning: transparency and distance floaters. Anchor the distance test
    # on the bbox center when one exists so a single far-away floater cannot
    # drag the reference point off the object.
    keep = merged.opacities >= stage.opacity_prune_threshold
    if obj.bbox is not None:
        centroid = obj.bbox.center
        radius = obj.bbox.extents.max() / 2.0
    else:
        centroid = (merged.positions[keep].mean(axis=0) if keep.any()
                    else merged.positions.mean(axis=0))
        radius = np.linalg.norm(obj.positions - centroid, axis=1).max()
    dist = np.linalg.norm(merged.positions - centroid, axis=1)
    keep &= dist <= stage.prune_distance_margin * radius
    out = merged.select(np.flatnonzero(keep))
    out.bbox = obj.bbox
    return out


def _check_finite(losses: dict, iteration: int, scene: Scene):
    if not all(np.isfinite(v) for v in losses.values()):
        raise DivergenceError(
            f"non-finite loss at iteration {iteration}: {losses}",
            state={"iteration": iteration, "losses": losses,
                   "splat_count": len(scene)})


def run_coarse(obj: Scene, target: AnchorTarget, stage: StageConfig,
               prior_3d, seed: int = 0, history: list | None = None) -> Scene:
    """Optimize the object scene against the anchor target. Returns a new
    scene; zero iterations returns the input unchanged."""
    scene = obj.copy()
    if stage.iterations == 0:
        return scene
    rng = np.random.default_rng(seed)
    sampler = stage.camera_sampler
    lrs = {"positions": stage.lr_position, "rotations": stage.lr_rotation,
           "log_scales": stage.lr_scale, "opacity_logits": stage.lr_opacity,
           "colors_dc": stage.lr_color}
    adam = AdamState(scene, lrs)
    grad_accum = np.zeros(len(scene))
    grad_count = 0

    for it in range(stage.iterations):
        use_anchor = sampler is None or rng.random() < stage.p_anchor
        cam = target.camera if use_anchor else sampler.sample(rng)
        losses, grads = coarse_losses(scene, target, cam, prior_3d, stage,
                                      iteration=it, rng=rng)
        _check_finite(losses, it, scene)
        if history is not None:
            history.append({"iteration": it, **losses})
        adam.step(scene, grads)
        grad_accum += np.linalg.norm(grads.positions, axis=1)
        grad_count += 1

        due = (it + 1) % stage.densify_interval == 0
        if due and it + 1 < stage.iterations:
            scene = densify_and_prune(scene, grad_accum / max(grad_count, 1),
                                      stage)
            adam = AdamState(scene, lrs)
            grad_accum = np.zeros(len(scene))
            grad_count = 0
    return scene


def run_enhance(obj: Scene, background: Scene, target: AnchorTarget,
                stage: StageConfig, base_prior, control_provider,
                prompt: str = "", seed: int = 0,
                history: list | None = None) -> Scene:
    """Texture-enhancement stage: DI-SDS over the merged scene plus anchor
    rgb/mask fitting; geometry learning rates are scaled down and
    background splats are never touched."""
    scene = obj.copy()
    if stage.iterations == 0:
        return scene
    if scene.bbox is None:
        raise InvalidParameterError("run_enhance: object scene needs a bbox")
    rng = np.random.default_rng(seed)
    sampler = stage.camera_sampler
    f = stage.geometry_lr_factor
    lrs = {"positions": stage.lr_position * f,
           "rotations": stage.lr_rotation * f,
           "log_scales": stage.lr_scale * f,
           "opacity_logits": stage.lr_opacity,
           "colors_dc": stage.lr_color}
    adam = AdamState(scene, lrs)
    n_bg = len(background)

    for it in range(stage.iterations):
        lam_rgb = stage.lambda_rgb.value(it, stage.iterations)
        lam_mask = stage.lambda_mask.value(it, stage.iterations)
        lam_di = stage.lambda_sds.value(it, stage.iterations)

        grads = SplatGradients.zeros(len(scene))
        losses = {}

        # anchor-view ground truth fitting on the object alone
        out_a = render(scene, target.camera)
        fg = target.foreground_mask > 0.5
        n_fg = max(int(fg.sum()), 1)
        diff = (out_a.color - target.foreground_rgb) * fg[..., None]
        losses["rgb"] = float((diff ** 2).sum() / (3 * n_fg))
        mdiff = out_a.mask - target.foreground_mask
        losses["mask"] = float((mdiff ** 2).mean())
        grads += render_backward(
            scene, target.camera, out_a,
            grad_color=lam_rgb * 2.0 * diff / (3 * n_fg),
            grad_mask=lam_mask * 2.0 * mdiff / mdiff.size)

        # DI-SDS on the merged render at a sampled view
        losses["di_sds"] = 0.0
        if lam_di > 0.0 and base_prior is not None:
            cam = target.camera if sampler is None or rng.random() < stage.p_anchor \
                else sampler.sample(rng)
            merged = merge_scenes(background, scene)
            out_m = render(merged, cam)
            bbox_mask = project_bbox_mask(scene.bbox, cam)
            background_image = out_m.color * (1.0 - bbox_mask[..., None])
            cond = ConditionBundle(text_embedding=view_conditioned_prompt(
                prompt, cam, target.camera) if prompt else None)
            g = di_sds_grad(base_prior, control_provider, out_m.color,
                            out_m.depth, bbox_mask, background_image,
                            cond, stage.sds, rng=rng)
            losses["di_sds"] = float(np.abs(g).mean())
            g_merged = render_backward(merged, cam, out_m,
                                       grad_color=lam_di * g)
            grads.positions += g_merged.positions[n_bg:]
            grads.rotations += g_merged.rotations[n_bg:]
            grads.log_scales += g_merged.log_scales[n_bg:]
            grads.opacity_logits += g_merged.opacity_logits[n_bg:]
            grads.colors_dc += g_merged.colors_dc[n_bg:]

        losses["total"] = lam_rgb * losses["rgb"] + lam_mask * losses["mask"]
        _check_finite(losses, it, scene)
        if history is not None:
            history.append({"iteration": it, **losses})
        adam.step(scene, grads)
    return scene
