"""Score-distillation operations: SDS, classifier-free guidance, and
depth-guided inpainting SDS (DI-SDS).

Every operation here returns the *image-space* gradient factor
w(t) (eps_hat - eps); chaining through the renderer Jacobian is the
optimizer's job via render_backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import DegenerateInputError, InvalidParameterError
from .priors import ConditionBundle, DiffusionPrior, NoiseSchedule

WEIGHT_FNS = ("constant", "one_minus_alphabar")


@dataclass
class SdsConfig:
    t_min: int = 20
    t_max: int = 980
    weight_fn: str = "one_minus_alphabar"
    guidance_scale: float = 0.0
    seed: int = 0

    def validate(self, schedule_length: int):
        if not 0 < self.t_min <= self.t_max <= schedule_length:
            raise InvalidParameterError(
                f"timestep bounds ({self.t_min}, {self.t_max}) invalid for "
                f"schedule of length {schedule_length}")
        if self.weight_fn not in WEIGHT_FNS:
            raise InvalidParameterError(f"unknown weight_fn '{self.weight_fn}'")

    def weight(self, t: int, schedule: NoiseSchedule) -> float:
        if self.weight_fn == "constant":
            return 1.0
        return 1.0 - schedule.alpha_bar(t)


def add_noise(x0: np.ndarray, t: int, noise: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                s: float) -> np.ndarray:
    """eps_hat = eps_cond + s * (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise InvalidParameterError("cfg_combine: shape mismatch")
    if s == 0.0:
        return eps_cond
    return eps_cond + s * (eps_cond - eps_uncond)


def invert_depth(depth_raw: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Rescale depth over masked pixels to [0, 1] with near mapping bright
    (output = 1 - scaled). Constant depth yields 0.5 everywhere."""
    depth_raw = np.asarray(depth_raw, dtype=np.float64)
    if mask is None:
        mask = np.ones(depth_raw.shape, dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise DegenerateInputError("invert_depth: empty mask")
    vals = depth_raw[mask]
    if not np.all(np.isfinite(vals)):
        raise InvalidParameterError("invert_depth: non-finite depth on mask")
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return np.full(depth_raw.shape, 0.5)
    scaled = np.clip((depth_raw - lo) / (hi - lo), 0.0, 1.0)
    return 1.0 - scaled


def _sample_step(prior: DiffusionPrior, latents: np.ndarray, cfg: SdsConfig,
                 rng: np.random.Generator):
    """Shared t/eps draw and noising for all distillation variants."""
    cfg.validate(len(prior.schedule))
    t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    eps = rng.standard_normal(latents.shape)
    x_t = add_noise(latents, t, eps, prior.schedule)
    return t, eps, x_t


def sds_grad(prior: DiffusionPrior, rendered: np.ndarray,
             cond: ConditionBundle, cfg: SdsConfig,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Image-space SDS gradient factor w(t) (eps_hat - eps)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    latents = prior.encode(np.asarray(rendered, dtype=np.float64))
    t, eps, x_t = _sample_step(prior, latents, cfg, rng)

    eps_hat = prior.predict_noise(x_t, t, cond)
    if cfg.guidance_scale > 0.0:
        eps_uncond = prior.predict_noise(x_t, t, ConditionBundle())
        eps_hat = cfg_combine(eps_hat, eps_uncond, cfg.guidance_scale)

    w = cfg.weight(t, prior.schedule)
    return prior.decode_gradient(w * (eps_hat - eps))


def sds_grad_3d(prior: DiffusionPrior, rendered: np.ndarray,
                reference: np.ndarray, relative_pose, cfg: SdsConfig,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """SDS against a 3D-aware prior conditioned on a reference image and a
    camera-pose delta instead of text."""
    cond = ConditionBundle(reference_image=reference, relative_pose=relative_pose)
    return sds_grad(prior, rendered, cond, cfg, rng=rng)


def di_sds_grad(base_prior: DiffusionPrior, control_provider,
                rendered: np.ndarray, depth_raw: np.ndarray,
                bbox_mask: np.ndarray, background_image: np.ndarray,
                cond: ConditionBundle, cfg: SdsConfig,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Depth-guided inpainting SDS gradient, zero outside the bbox mask.

    The latent block fed to the base prior is the channel concatenation
    (x_t, mask, masked-image latents); the unconditional branch receives
    x_t only, zero-padded to the same channel count.
    """
    if depth_raw is None or bbox_mask is None:
        raise InvalidParameterError("di_sds_grad requires depth and bbox mask")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    bbox_mask = np.asarray(bbox_mask, dtype=np.float64)

    latents = base_prior.encode(np.asarray(rendered, dtype=np.float64))
    t, eps, x_t = _sample_step(base_prior, latents, cfg, rng)

    depth_cond = invert_depth(depth_raw)
    ctrl_cond = ConditionBundle(text_embedding=cond.text_embedding,
                                depth=depth_cond)
    control = control_provider.control_features(x_t, t, ctrl_cond)

    masked_latents = base_prior.encode(np.asarray(background_image, dtype=np.float64))
    mask_channel = bbox_mask[..., None]
    block = np.concatenate([x_t, mask_channel, masked_latents], axis=-1)

    full_cond = ConditionBundle(
        text_embedding=cond.text_embedding, depth=depth_cond,
        bbox_mask=bbox_mask, masked_image_latents=masked_latents,
        control_features=control)
    eps_hat = base_prior.predict_noise(block, t, full_cond)
    if cfg.guidance_scale > 0.0:
        pad = np.zeros_like(block)
        pad[..., : x_t.shape[-1]] = x_t
        eps_uncond = base_prior.predict_noise(pad, t, ConditionBundle())
        eps_hat = cfg_combine(eps_hat, eps_uncond, cfg.guidance_scale)

    w = cfg.weight(t, base_prior.schedule)
    grad = base_prior.decode_gradient(w * (eps_hat - eps))
    return grad * bbox_mask[..., None]


# ---------------------------------------------------------------------------
# view-conditioned prompting
# ---------------------------------------------------------------------------

def _azimuth_degrees(camera: Camera) -> float:
    f = camera.forward
    return np.degrees(np.arctan2(f[1], f[0]))


def _elevation_degrees(camera: Camera) -> float:
    f = camera.forward
    return np.degrees(np.arcsin(np.clip(-f[2], -1.0, 1.0)))


def view_conditioned_prompt(base_prompt: str, camera: Camera,
                            anchor: Camera) -> str:
    """Append a direction tag chosen by the camera's pose delta to the anchor."""
    if _elevation_degrees(camera) > 60.0:
        tag = "overhead view"
    else:
        delta = _azimuth_degrees(camera) - _azimuth_degrees(anchor)
        delta = abs((delta + 180.0) % 360.0 - 180.0)
        if delta < 45.0:
            tag = "front view"
        elif delta <= 135.0:
            tag = "side view"
        else:
            tag = "back view"
    return f"{base_prompt}, photorealistic, {tag}"
