"""Shared fixtures and numerical oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from splatedit.camera import Camera, look_at, simple_camera
from splatedit.renderer import render
from splatedit.scene import Scene, inverse_sigmoid, rgb_to_dc


def make_random_scene(rng: np.random.Generator, count: int, *,
                      spread: float = 0.5,
                      scale_range=(0.05, 0.2),
                      opacity_range=(0.2, 0.9)) -> Scene:
    """Random well-conditioned scene centred at the origin."""
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return Scene(
        positions=rng.uniform(-spread, spread, (count, 3)),
        rotations=quats,
        log_scales=np.log(rng.uniform(*scale_range, (count, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, count)),
        colors_dc=rgb_to_dc(rng.uniform(0.1, 0.9, (count, 3))),
    )


def make_camera(width=24, height=24, *, distance=2.5, azimuth_deg=0.0,
                elevation_deg=10.0, fov=50.0, near=0.1, far=50.0) -> Camera:
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    position = distance * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return look_at(position, np.zeros(3),
                   **simple_camera(width, height, fov, near=near, far=far))


def render_loss(scene: Scene, camera: Camera, background,
                grad_color, grad_depth, grad_mask) -> float:
    """Scalar objective <grad_color, C> + <grad_depth, D> + <grad_mask, M>.

    Its exact gradient w.r.t. scene parameters is what render_backward
    returns when fed the same per-pixel weight images.
    """
    out = render(scene, camera, background)
    return float((grad_color * out.color).sum()
                 + (grad_depth * out.depth).sum()
                 + (grad_mask * out.mask).sum())


_PARAM_FIELDS = (
    ("positions", "positions"),
    ("rotations", "rotations"),
    ("log_scales", "log_scales"),
    ("opacity_logits", "opacity_logits"),
    ("colors_dc", "colors_dc"),
)


def finite_difference_gradients(scene: Scene, camera: Camera, background,
                                grad_color, grad_depth, grad_mask,
                                eps: float = 1e-5) -> dict:
    """Central finite differences of render_loss for every raw parameter."""
    result = {}
    for grad_name, field in _PARAM_FIELDS:
        arr = getattr(scene, field)
        g = np.zeros_like(arr, dtype=float)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = render_loss(scene, camera, background,
                             grad_color, grad_depth, grad_mask)
            flat[i] = orig - eps
            lo = render_loss(scene, camera, background,
                             grad_color, grad_depth, grad_mask)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        result[grad_name] = g
    return result


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Worst relative error over entries whose magnitude exceeds ``floor``."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    sig = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not sig.any():
        return 0.0
    denom = np.maximum(np.abs(a[sig]), np.abs(n[sig]))
    return float(np.max(np.abs(a[sig] - n[sig]) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_object() -> Scene:
    """Fixed 50-splat blob used as ground truth by the fitting tests."""
    r = np.random.default_rng(42)
    quats = r.normal(size=(50, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return Scene(
        positions=r.uniform(-0.35, 0.35, (50, 3)),
        rotations=quats,
        log_scales=np.log(r.uniform(0.05, 0.12, (50, 3))),
        opacity_logits=inverse_sigmoid(r.uniform(0.6, 0.9, 50)),
        colors_dc=rgb_to_dc(r.uniform(0.2, 0.9, (50, 3))),
    )
