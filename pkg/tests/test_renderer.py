"""Forward rasterizer: projection, compositing, depth, mask, tiling."""

import numpy as np
import pytest

from splatedit.camera import look_at, simple_camera
from splatedit.renderer import (ProjectedSplat, RenderOutput, project, render,
                                render_backward)
from splatedit.scene import (GaussianSplat, Scene, inverse_sigmoid, rgb_to_dc,
                             merge_scenes)
from .conftest import make_camera, make_random_scene


def axis_scene(entries):
    """Splats on the optical axis of a camera at +x looking at the origin.

    entries: list of (distance_from_camera, opacity, rgb, scale).
    Camera sits at (3, 0, 0), so distance d puts a splat at x = 3 - d.
    """
    n = len(entries)
    positions = np.array([[3.0 - d, 0.0, 0.0] for d, _, _, _ in entries])
    return Scene(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.log([[s, s, s] for _, _, _, s in entries]),
        opacity_logits=inverse_sigmoid([o for _, o, _, _ in entries]),
        colors_dc=rgb_to_dc(np.array([c for _, _, c, _ in entries])),
    )


def axis_camera(width=24, height=24, fx=100.0):
    return look_at([3.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                   fx=fx, fy=fx, cx=width / 2, cy=height / 2,
                   width=width, height=height, near=0.1, far=50.0)


CENTER = (12, 12)  # pixel nearest the principal point for a 24x24 image


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_center_matches_point_projection():
    cam = axis_camera()
    splat = GaussianSplat(position=np.array([1.0, 0.0, 0.0]),
                          rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                          scale=np.array([0.1, 0.1, 0.1]),
                          opacity=0.8, color=np.array([1.0, 0.0, 0.0]))
    proj = project(splat, cam)
    assert isinstance(proj, ProjectedSplat)
    uv, z = cam.project_points(splat.position[None])
    np.testing.assert_allclose(proj.mean2d, uv[0], atol=1e-9)
    assert proj.depth == pytest.approx(z[0])
    assert proj.depth == pytest.approx(2.0)


def test_project_isotropic_covariance_is_focal_scaled():
    cam = axis_camera()
    splat = GaussianSplat(position=np.array([1.0, 0.0, 0.0]),
                          rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                          scale=np.array([0.1, 0.1, 0.1]),
                          opacity=0.8, color=np.ones(3))
    proj = project(splat, cam)
    # on-axis isotropic: sigma_px = f * s / z, plus the 0.3 px low-pass
    expected = (100.0 * 0.1 / 2.0) ** 2 + 0.3
    np.testing.assert_allclose(np.diag(proj.cov2d), expected, rtol=1e-12)


def test_project_culls_behind_camera():
    cam = axis_camera()
    splat = GaussianSplat(position=np.array([5.0, 0.0, 0.0]),  # behind
                          rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                          scale=np.array([0.1, 0.1, 0.1]),
                          opacity=0.8, color=np.ones(3))
    assert project(splat, cam) is None


def test_project_culls_far_offscreen():
    cam = axis_camera()
    splat = GaussianSplat(position=np.array([1.0, 50.0, 0.0]),
                          rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                          scale=np.array([0.01, 0.01, 0.01]),
                          opacity=0.8, color=np.ones(3))
    assert project(splat, cam) is None


# ---------------------------------------------------------------------------
# compositing oracles
# ---------------------------------------------------------------------------

def test_empty_scene_renders_background_only():
    cam = axis_camera()
    out = render(Scene.empty(), cam, background=(0.2, 0.4, 0.6))
    assert out.color.shape == (24, 24, 3)
    np.testing.assert_allclose(
        out.color, np.broadcast_to([0.2, 0.4, 0.6], out.color.shape),
        atol=1e-12)
    np.testing.assert_allclose(out.mask, 0.0, atol=1e-12)
    np.testing.assert_allclose(out.depth, cam.far, atol=1e-12)


def test_single_splat_center_pixel_closed_form():
    # A huge splat so the Gaussian falloff at the center pixel is ~1:
    # color = c * a, mask = a against a black background.
    scene = axis_scene([(2.0, 0.7, (0.9, 0.3, 0.1), 8.0)])
    out = render(scene, axis_camera())
    np.testing.assert_allclose(out.color[CENTER],
                               0.7 * np.array([0.9, 0.3, 0.1]), atol=1e-5)
    assert out.mask[CENTER] == pytest.approx(0.7, abs=1e-5)
    assert out.depth[CENTER] == pytest.approx(0.7 * 2.0, abs=1e-4)
    assert out.normalized_depth[CENTER] == pytest.approx(2.0, abs=1e-4)


def test_two_splat_overlap_matches_closed_form():
    c1, c2 = np.array([0.9, 0.2, 0.1]), np.array([0.1, 0.4, 0.8])
    a, b = 0.7, 0.6
    scene = axis_scene([(2.0, a, c1, 8.0), (2.5, b, c2, 8.0)])
    out = render(scene, axis_camera())
    expected = c1 * a + c2 * b * (1.0 - a)
    np.testing.assert_allclose(out.color[CENTER], expected, atol=1e-5)
    assert out.mask[CENTER] == pytest.approx(a + b * (1.0 - a), abs=1e-5)


def test_compositing_order_is_by_depth_not_input_order():
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    a, b = 0.8, 0.8
    near_first = axis_scene([(2.0, a, c1, 8.0), (2.5, b, c2, 8.0)])
    far_first = axis_scene([(2.5, b, c2, 8.0), (2.0, a, c1, 8.0)])
    cam = axis_camera()
    np.testing.assert_allclose(render(near_first, cam).color,
                               render(far_first, cam).color, atol=1e-12)


def test_background_shows_through_transparency():
    scene = axis_scene([(2.0, 0.25, (1.0, 1.0, 1.0), 8.0)])
    out = render(scene, axis_camera(), background=(0.0, 0.0, 1.0))
    # blue bleeds through with weight (1 - alpha)
    assert out.color[CENTER][2] == pytest.approx(
        0.25 + 0.75 * 1.0, abs=1e-4)


def test_opacity_saturates_at_sample_cap():
    # A near-opaque splat composites with per-sample opacity capped at 0.99.
    scene = axis_scene([(2.0, 0.999999, (1.0, 1.0, 1.0), 8.0)])
    out = render(scene, axis_camera())
    assert out.mask.max() <= 0.99 + 1e-9
    assert out.mask[CENTER] == pytest.approx(0.99, abs=1e-5)


def test_mask_bounded_and_monotone_in_splat_count(rng):
    cam = make_camera()
    for _ in range(50):
        scene = make_random_scene(rng, int(rng.integers(1, 15)))
        out = render(scene, cam)
        assert np.isfinite(out.color).all()
        assert out.mask.min() >= 0.0 and out.mask.max() <= 1.0
        # adding splats can only increase coverage
        bigger = merge_scenes(scene, make_random_scene(rng, 3))
        assert (render(bigger, cam).mask >= out.mask - 1e-12).all()


def test_merge_render_equals_render_of_union(rng):
    cam = make_camera()
    a = make_random_scene(rng, 8)
    b = make_random_scene(rng, 8)
    ab = render(merge_scenes(a, b), cam)
    ba = render(merge_scenes(b, a), cam)
    np.testing.assert_allclose(ab.color, ba.color, atol=1e-12)
    np.testing.assert_allclose(ab.depth, ba.depth, atol=1e-12)


# ---------------------------------------------------------------------------
# tiling / parallelism
# ---------------------------------------------------------------------------

def test_tile_size_does_not_change_image(rng):
    # Tile granularity only affects which far-tail pixels a splat touches,
    # so images agree to well below visual precision.
    cam = make_camera(33, 29)  # sizes not divisible by the tile edge
    scene = make_random_scene(rng, 20)
    ref = render(scene, cam, tile_size=16)
    for ts in (4, 8, 64):
        out = render(scene, cam, tile_size=ts)
        np.testing.assert_allclose(out.color, ref.color, atol=1e-5)
        np.testing.assert_allclose(out.mask, ref.mask, atol=1e-5)


def test_parallel_render_is_bitwise_identical(rng):
    cam = make_camera(48, 40)
    scene = make_random_scene(rng, 40)
    serial = render(scene, cam, background=(0.1, 0.2, 0.3), parallel=False)
    threaded = render(scene, cam, background=(0.1, 0.2, 0.3), parallel=True)
    assert np.array_equal(serial.color, threaded.color)
    assert np.array_equal(serial.depth, threaded.depth)
    assert np.array_equal(serial.mask, threaded.mask)


def test_parallel_backward_is_bitwise_identical(rng):
    cam = make_camera(48, 40)
    scene = make_random_scene(rng, 30)
    out = render(scene, cam)
    gc = rng.normal(size=out.color.shape)
    serial = render_backward(scene, cam, out, grad_color=gc, parallel=False)
    threaded = render_backward(scene, cam, out, grad_color=gc, parallel=True)
    assert np.array_equal(serial.positions, threaded.positions)
    assert np.array_equal(serial.rotations, threaded.rotations)


def test_render_rejects_nonpositive_tile_size(rng):
    with pytest.raises(Exception):
        render(make_random_scene(rng, 2), make_camera(), tile_size=0)
