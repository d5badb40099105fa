"""Diffusion-prior interface, noise schedule, and analytic test priors.

A prior predicts the noise added to a latent at a given timestep. No
pre-trained weights live here: the analytic Gaussian prior is a closed-form
optimal denoiser used as a verification oracle, and the remote adapter
(remote.py) talks to an external service over a byte-stream protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import InvalidParameterError

DEFAULT_SCHEDULE_LENGTH = 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """DDPM cumulative-alpha table; timesteps are 1-based indices."""

    alphas_cumprod: np.ndarray

    @classmethod
    def ddpm_linear(cls, length: int = DEFAULT_SCHEDULE_LENGTH,
                    beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, length)
        return cls(np.cumprod(1.0 - betas))

    def __len__(self) -> int:
        return len(self.alphas_cumprod)

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= len(self):
            raise InvalidParameterError(
                f"timestep {t} outside schedule range [1, {len(self)}]")
        return float(self.alphas_cumprod[t - 1])


@dataclass
class ConditionBundle:
    """Everything a prior query may be conditioned on; all fields optional."""

    text_embedding: object = None          # opaque handle
    reference_image: np.ndarray | None = None
    relative_pose: tuple | None = None     # (d_azimuth, d_elevation, d_radius)
    depth: np.ndarray | None = None        # inverted, scaled to [0, 1]
    bbox_mask: np.ndarray | None = None
    masked_image_latents: np.ndarray | None = None
    control_features: tuple | None = None  # (D, M) residual stacks

    def validate(self):
        if self.depth is not None:
            if np.min(self.depth) < -1e-9 or np.max(self.depth) > 1 + 1e-9:
                raise InvalidParameterError("conditioning depth not in [0, 1]")
        if self.bbox_mask is not None:
            vals = np.unique(self.bbox_mask)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise InvalidParameterError("bbox mask must be binary")


@runtime_checkable
class DiffusionPrior(Protocol):
    """Noise predictor over latents, stateless between calls.

    `predict_noise` may receive a latent block wider than `latent_channels`
    (inpainting-style channel concatenation); the prediction always has
    `latent_channels` channels.
    """

    schedule: NoiseSchedule
    latent_channels: int

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode_gradient(self, grad_latent: np.ndarray) -> np.ndarray: ...

    def predict_noise(self, latents: np.ndarray, t: int,
                      cond: ConditionBundle) -> np.ndarray: ...


@dataclass
class AnalyticGaussianPrior:
    """Optimal denoiser for a Gaussian image distribution centered at `mean`.

    For x_t = sqrt(abar) x0 + sqrt(1-abar) eps the prediction
    (x_t - sqrt(abar) mean) / sqrt(1-abar) equals eps + sqrt(abar/(1-abar))
    (x0 - mean), so score-distillation gradients against this prior point
    exactly from the current image toward `mean`. Image-space (identity
    codec); extra concatenated channels are ignored.
    """

    mean: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.ddpm_linear)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)

    @property
    def latent_channels(self) -> int:
        return self.mean.shape[-1]

    def encode(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float64)

    def decode_gradient(self, grad_latent: np.ndarray) -> np.ndarray:
        return grad_latent

    def predict_noise(self, latents: np.ndarray, t: int,
                      cond: ConditionBundle) -> np.ndarray:
        abar = self.schedule.alpha_bar(t)
        x_t = latents[..., : self.latent_channels]
        return (x_t - np.sqrt(abar) * self.mean) / np.sqrt(1.0 - abar)


@dataclass
class CallbackPrior:
    """Analytic prior whose target mean is produced per query by a callback
    receiving the condition bundle (e.g. renders ground truth at the
    conditioning pose). Used to emulate a 3D-aware prior in tests."""

    mean_fn: object
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.ddpm_linear)
    latent_channels: int = 3

    def encode(self, image):
        return np.asarray(image, dtype=np.float64)

    def decode_gradient(self, grad_latent):
        return grad_latent

    def predict_noise(self, latents, t, cond):
        mean = np.asarray(self.mean_fn(cond), dtype=np.float64)
        abar = self.schedule.alpha_bar(t)
        x_t = latents[..., : self.latent_channels]
        return (x_t - np.sqrt(abar) * mean) / np.sqrt(1.0 - abar)


class ZeroControlProvider:
    """Control-feature provider returning zero residual stacks."""

    def control_features(self, latents, t, cond):
        shape = latents.shape
        return np.zeros(shape), np.zeros(shape)
