"""Localized 3D Gaussian Splatting editing toolkit."""

from .anchor import (AzimuthRing, ViewScore, brightness_ratio, propose_anchor,
                     sample_ring, value_channel)
from .camera import Camera, look_at, simple_camera
from .guidance import (SdsConfig, add_noise, cfg_combine, di_sds_grad,
                       invert_depth, sds_grad, sds_grad_3d,
                       view_conditioned_prompt)
from .optim import (AnchorTarget, CameraSampler, Ramp, StageConfig,
                    coarse_losses, densify_and_prune, init_sphere, run_coarse,
                    run_enhance)
from .ply import load_scene, save_scene
from .priors import (AnalyticGaussianPrior, CallbackPrior, ConditionBundle,
                     DiffusionPrior, NoiseSchedule, ZeroControlProvider)
from .renderer import (ProjectedSplat, RenderOutput, SplatGradients, project,
                       render, render_backward)
from .scene import (BoundingBox, GaussianSplat, Scene, build_covariance,
                    excise_bbox, merge_scenes)

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianPrior", "AnchorTarget", "AzimuthRing", "BoundingBox",
    "CallbackPrior", "Camera", "CameraSampler", "ConditionBundle",
    "DiffusionPrior", "GaussianSplat", "NoiseSchedule", "ProjectedSplat",
    "Ramp", "RenderOutput", "Scene", "SdsConfig", "SplatGradients",
    "ViewScore", "ZeroControlProvider", "add_noise", "brightness_ratio",
    "build_covariance", "cfg_combine", "coarse_losses", "densify_and_prune",
    "di_sds_grad", "excise_bbox", "init_sphere", "invert_depth", "load_scene",
    "look_at", "merge_scenes", "project", "propose_anchor", "render",
    "render_backward", "run_coarse", "run_enhance", "sample_ring",
    "save_scene", "sds_grad", "sds_grad_3d", "simple_camera", "value_channel",
    "view_conditioned_prompt",
]
