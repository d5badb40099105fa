"""Tile-based differentiable rasterizer for 3D Gaussian splats.

Forward: EWA projection of each splat to a 2D Gaussian, global front-to-back
depth sort, per-tile alpha compositing of color, alpha-weighted depth, and
accumulated opacity (mask).

Backward: hand-derived gradients of an arbitrary scalar functional
<grad_color, C> + <grad_depth, D> + <grad_mask, m> with respect to every
pre-activation splat parameter (position, raw quaternion, log-scale,
opacity logit, DC color coefficient).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import InvalidParameterError
from .scene import SH_C0, Scene, quaternions_to_matrices

TILE_SIZE = 16
SIGMA_MAX = 0.99          # per-contributor alpha clamp
TRANSMITTANCE_CUTOFF = 1e-4
LOWPASS = 0.3             # px^2 diagonal term added to every 2D covariance
RADIUS_99 = 3.0349        # sqrt(chi2.ppf(0.99, df=2)): 99% ellipse radius
# Binning radius used by render/backward. Wider than the 99% ellipse so that
# tile-assignment discontinuities stay below ~1e-8 and finite-difference
# gradient checks are clean.
RADIUS_BIN = 6.1


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, after low-pass
    depth: float         # camera-space z of the center, world units
    color: np.ndarray    # (3,) rgb
    opacity: float


@dataclass
class SplatGradients:
    """Gradients w.r.t. pre-activation scene parameters."""

    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) raw quaternion
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors_dc: np.ndarray       # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "SplatGradients") -> "SplatGradients":
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors_dc += other.colors_dc
        return self

    def scaled(self, k: float) -> "SplatGradients":
        return SplatGradients(self.positions * k, self.rotations * k,
                              self.log_scales * k, self.opacity_logits * k,
                              self.colors_dc * k)


@dataclass
class _Projection:
    """Batch projection of all scene splats in front-to-back order."""

    ids: np.ndarray      # (K,) original splat indices, sorted by (depth, id)
    mean2d: np.ndarray   # (K, 2)
    conic: np.ndarray    # (K, 3) inverse-covariance entries (a, b, c)
    cov2d: np.ndarray    # (K, 2, 2)
    depth: np.ndarray    # (K,)
    color: np.ndarray    # (K, 3)
    alpha: np.ndarray    # (K,)
    radius: np.ndarray   # (K,) binning radius in pixels
    cam_xyz: np.ndarray  # (K, 3) camera-space centers


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-weighted (unnormalized)
    mask: np.ndarray   # (H, W) accumulated opacity
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    projection: _Projection | None = field(default=None, repr=False)

    @property
    def normalized_depth(self) -> np.ndarray:
        """Depth divided by mask where mask is nonzero."""
        safe = np.where(self.mask > 1e-8, self.mask, 1.0)
        return np.where(self.mask > 1e-8, self.depth / safe, 0.0)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _project_arrays(scene: Scene, camera: Camera,
                    radius_mult: float) -> _Projection:
    cam_xyz = scene.positions @ camera.rotation.T + camera.translation
    z = cam_xyz[:, 2]
    front = z > camera.near

    zs = np.where(front, z, 1.0)
    u = camera.fx * cam_xyz[:, 0] / zs + camera.cx
    v = camera.fy * cam_xyz[:, 1] / zs + camera.cy

    # camera-space 3D covariance V = Rw Sigma Rw^T
    rot = quaternions_to_matrices(scene.unit_rotations)
    m = rot * scene.scales[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    v3d = np.einsum("ij,njk,lk->nil", camera.rotation, sigma, camera.rotation)

    # EWA affine Jacobian at the center
    jac = np.zeros((len(scene), 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * cam_xyz[:, 0] / zs ** 2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * cam_xyz[:, 1] / zs ** 2
    cov2d = np.einsum("nij,njk,nlk->nil", jac, v3d, jac)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = radius_mult * np.sqrt(np.maximum(lam_max, 0.0))

    visible = front & (det > 0)
    visible &= (u + radius > 0) & (u - radius < camera.width)
    visible &= (v + radius > 0) & (v - radius < camera.height)

    ids = np.flatnonzero(visible)
    order = np.lexsort((ids, z[ids]))
    ids = ids[order]

    inv_det = 1.0 / det[ids]
    conic = np.stack([c[ids] * inv_det, -b[ids] * inv_det, a[ids] * inv_det],
                     axis=1)
    return _Projection(
        ids=ids,
        mean2d=np.stack([u[ids], v[ids]], axis=1),
        conic=conic,
        cov2d=cov2d[ids],
        depth=z[ids],
        color=scene.colors[ids],
        alpha=scene.opacities[ids],
        radius=radius[ids],
        cam_xyz=cam_xyz[ids],
    )


def project(splat, camera: Camera) -> ProjectedSplat | None:
    """Project one splat; returns None when culled (behind near plane or
    the 99% ellipse misses the viewport)."""
    scene = Scene.from_splats([splat])
    proj = _project_arrays(scene, camera, radius_mult=RADIUS_99)
    if len(proj.ids) == 0:
        return None
    return ProjectedSplat(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0],
                          depth=float(proj.depth[0]), color=proj.color[0],
                          opacity=float(proj.alpha[0]))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _tile_grid(height, width, tile_size):
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            yield y0, x0, min(y0 + tile_size, height), min(x0 + tile_size, width)


def _tile_splats(proj: _Projection, y0, x0, y1, x1) -> np.ndarray:
    """Indices (into proj order) of splats whose radius box meets the tile."""
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius
    hit = (u + r > x0) & (u - r < x1) & (v + r > y0) & (v - r < y1)
    return np.flatnonzero(hit)


def _tile_weights(proj: _Projection, sel: np.ndarray, y0, x0, y1, x1):
    """Per-contributor sigma, exclusive transmittance, and weights for a tile.

    Returns (sigma, t_excl, weights, gauss, dx, dy), each (K, P) with P the
    flattened pixel count; weights are zeroed past the transmittance cutoff.
    """
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    px = px.ravel()[None, :]
    py = py.ravel()[None, :]

    dx = px - proj.mean2d[sel, 0][:, None]
    dy = py - proj.mean2d[sel, 1][:, None]
    ca = proj.conic[sel, 0][:, None]
    cb = proj.conic[sel, 1][:, None]
    cc = proj.conic[sel, 2][:, None]
    quad = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gauss = np.exp(-0.5 * quad)
    sigma = np.minimum(proj.alpha[sel][:, None] * gauss, SIGMA_MAX)

    t_excl = np.ones_like(sigma)
    if sigma.shape[0] > 1:
        np.cumprod(1.0 - sigma[:-1], axis=0, out=t_excl[1:])
    weights = sigma * t_excl
    weights[t_excl < TRANSMITTANCE_CUTOFF] = 0.0
    return sigma, t_excl, weights, gauss, dx, dy


def render(scene: Scene, camera: Camera, background=(0.0, 0.0, 0.0), *,
           tile_size: int = TILE_SIZE, parallel: bool = False) -> RenderOutput:
    """Rasterize a scene. Empty scenes yield background color, zero mask,
    and far depth."""
    h, w = camera.height, camera.width
    if h <= 0 or w <= 0:
        raise InvalidParameterError("image dimensions must be positive")
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    mask = np.zeros((h, w))

    if len(scene) == 0:
        depth[:] = camera.far
        return RenderOutput(color=color, depth=depth, mask=mask,
                            background=bg, projection=None)

    proj = _project_arrays(scene, camera, radius_mult=RADIUS_BIN)

    def do_tile(bounds):
        y0, x0, y1, x1 = bounds
        sel = _tile_splats(proj, y0, x0, y1, x1)
        if len(sel) == 0:
            return bounds, None
        _, _, weights, _, _, _ = _tile_weights(proj, sel, y0, x0, y1, x1)
        th, tw = y1 - y0, x1 - x0
        t_color = np.einsum("kp,kc->pc", weights, proj.color[sel])
        t_depth = weights.T @ proj.depth[sel]
        t_mask = weights.sum(axis=0)
        return bounds, (t_color.reshape(th, tw, 3),
                        t_depth.reshape(th, tw), t_mask.reshape(th, tw))

    tiles = list(_tile_grid(h, w, tile_size))
    if parallel and len(tiles) > 1:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(do_tile, tiles))
    else:
        results = [do_tile(t) for t in tiles]

    for (y0, x0, y1, x1), payload in results:
        if payload is None:
            continue
        t_color, t_depth, t_mask = payload
        color[y0:y1, x0:x1] = t_color + bg * (1.0 - t_mask[..., None])
        depth[y0:y1, x0:x1] = t_depth
        mask[y0:y1, x0:x1] = t_mask

    return RenderOutput(color=color, depth=depth, mask=mask,
                        background=bg, projection=proj)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _quat_rotation_vjp(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """VJP of the unit-quaternion -> rotation-matrix map, (N,4),(N,3,3)->(N,4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_r
    gw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2]
                + z * g[:, 1, 0] - x * g[:, 1, 2]
                - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2.0 * (y * g[:, 0, 1] + z * g[:, 0, 2]
                + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
                + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2.0 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
                + x * g[:, 1, 0] + z * g[:, 1, 2]
                - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2.0 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
                + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
                + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def render_backward(scene: Scene, camera: Camera, output: RenderOutput,
                    grad_color=None, grad_depth=None, grad_mask=None, *,
                    tile_size: int = TILE_SIZE,
                    parallel: bool = False) -> SplatGradients:
    """Gradients of <grad_color, C> + <grad_depth, D> + <grad_mask, m>
    w.r.t. every pre-activation splat parameter.

    `output` must come from `render` on the same scene and camera; culled
    splats receive zero gradient.
    """
    h, w = camera.height, camera.width
    zeros_hw = np.zeros((h, w))
    gc = zeros_hw[..., None].repeat(3, -1) if grad_color is None \
        else np.asarray(grad_color, dtype=np.float64)
    gd = zeros_hw if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    gm = zeros_hw if grad_mask is None else np.asarray(grad_mask, dtype=np.float64)
    if gc.shape != (h, w, 3) or gd.shape != (h, w) or gm.shape != (h, w):
        raise InvalidParameterError("gradient image shape mismatch")

    grads = SplatGradients.zeros(len(scene))
    proj = output.projection
    if proj is None or len(proj.ids) == 0:
        return grads

    bg = np.asarray(output.background, dtype=np.float64).reshape(3)

    k_total = len(proj.ids)
    # per-projected-splat accumulators (2D-space gradients)
    g_rgb = np.zeros((k_total, 3))
    g_z = np.zeros(k_total)
    g_alpha = np.zeros(k_total)
    g_mean = np.zeros((k_total, 2))
    g_conic = np.zeros((k_total, 3))  # d/d(a, b, c) of the conic

    def do_tile(bounds):
        y0, x0, y1, x1 = bounds
        sel = _tile_splats(proj, y0, x0, y1, x1)
        if len(sel) == 0:
            return None
        sigma, t_excl, weights, gauss, dx, dy = _tile_weights(
            proj, sel, y0, x0, y1, x1)
        active = t_excl >= TRANSMITTANCE_CUTOFF
        colors = proj.color[sel]                       # (K, 3)
        depths = proj.depth[sel][:, None]              # (K, 1)
        gc_t = gc[y0:y1, x0:x1].reshape(-1, 3)         # (P, 3)
        gd_t = gd[y0:y1, x0:x1].ravel()                # (P,)
        gm_t = gm[y0:y1, x0:x1].ravel()

        # suffix sums over later contributors (exclusive, from the back)
        def suffix(a):
            s = np.zeros_like(a)
            if a.shape[0] > 1:
                s[:-1] = np.cumsum(a[::-1], axis=0)[::-1][1:]
            return s

        s_mask = suffix(weights)                            # (K, P)
        s_depth = suffix(weights * depths)
        s_cdot = suffix(weights[..., None] * colors[:, None, :])  # (K, P, 3)

        common = gm_t - gc_t @ bg                           # (P,)
        inv_rest = 1.0 / (1.0 - sigma)
        direct = (colors @ gc_t.T) + depths * gd_t[None, :] + common[None, :]
        later = (np.einsum("kpc,pc->kp", s_cdot, gc_t)
                 + s_depth * gd_t[None, :] + s_mask * common[None, :])
        d_sigma = t_excl * direct - inv_rest * later
        d_sigma[~active] = 0.0

        unclamped = proj.alpha[sel][:, None] * gauss < SIGMA_MAX
        d_sigma_u = d_sigma * unclamped

        out = {"sel": sel}
        out["rgb"] = np.einsum("kp,pc->kc", weights, gc_t)
        out["z"] = weights @ gd_t
        out["alpha"] = (d_sigma_u * gauss).sum(axis=1)
        gg = d_sigma_u * proj.alpha[sel][:, None] * gauss   # dL/dG' * G'
        ca = proj.conic[sel, 0][:, None]
        cb = proj.conic[sel, 1][:, None]
        cc = proj.conic[sel, 2][:, None]
        out["mean"] = np.stack([
            (gg * (ca * dx + cb * dy)).sum(axis=1),
            (gg * (cb * dx + cc * dy)).sum(axis=1)], axis=1)
        out["conic"] = np.stack([
            (gg * (-0.5 * dx * dx)).sum(axis=1),
            (gg * (-dx * dy)).sum(axis=1),
            (gg * (-0.5 * dy * dy)).sum(axis=1)], axis=1)
        return out

    tiles = list(_tile_grid(h, w, tile_size))
    if parallel and len(tiles) > 1:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(do_tile, tiles))
    else:
        results = [do_tile(t) for t in tiles]

    # deterministic reduction in tile order
    for out in results:
        if out is None:
            continue
        sel = out["sel"]
        g_rgb[sel] += out["rgb"]
        g_z[sel] += out["z"]
        g_alpha[sel] += out["alpha"]
        g_mean[sel] += out["mean"]
        g_conic[sel] += out["conic"]

    _chain_to_parameters(scene, camera, proj, grads,
                         g_rgb, g_z, g_alpha, g_mean, g_conic)
    return grads


def _chain_to_parameters(scene: Scene, camera: Camera, proj: _Projection,
                         grads: SplatGradients, g_rgb, g_z, g_alpha,
                         g_mean, g_conic) -> None:
    """Chain 2D-space gradients back to pre-activation 3D parameters."""
    ids = proj.ids
    k = len(ids)
    if k == 0:
        return
    fx, fy = camera.fx, camera.fy
    x, y, z = proj.cam_xyz[:, 0], proj.cam_xyz[:, 1], proj.cam_xyz[:, 2]

    # conic -> 2D covariance: cov = A^{-1} so dL/dcov = -A dL/dA A
    a_mat = np.empty((k, 2, 2))
    a_mat[:, 0, 0] = proj.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = proj.conic[:, 1]
    a_mat[:, 1, 1] = proj.conic[:, 2]
    dl_da = np.empty((k, 2, 2))
    dl_da[:, 0, 0] = g_conic[:, 0]
    dl_da[:, 0, 1] = dl_da[:, 1, 0] = 0.5 * g_conic[:, 1]
    dl_da[:, 1, 1] = g_conic[:, 2]
    dl_dcov = -np.einsum("nij,njk,nkl->nil", a_mat, dl_da, a_mat)

    # recompute camera-space 3D covariance and Jacobian
    rot3 = quaternions_to_matrices(scene.unit_rotations[ids])
    scales = scene.scales[ids]
    m = rot3 * scales[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    v3d = np.einsum("ij,njk,lk->nil", camera.rotation, sigma, camera.rotation)
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2

    dl_dj = 2.0 * np.einsum("nij,njk,nkl->nil", dl_dcov, jac, v3d)
    dl_dv = np.einsum("nji,njk,nkl->nil", jac, dl_dcov, jac)
    dl_dsigma = np.einsum("ji,njk,kl->nil", camera.rotation, dl_dv,
                          camera.rotation)

    # camera-space position gradient
    dl_dt = np.zeros((k, 3))
    dl_dt[:, 0] = g_mean[:, 0] * fx / z + dl_dj[:, 0, 2] * (-fx / z ** 2)
    dl_dt[:, 1] = g_mean[:, 1] * fy / z + dl_dj[:, 1, 2] * (-fy / z ** 2)
    dl_dt[:, 2] = (-g_mean[:, 0] * fx * x / z ** 2
                   - g_mean[:, 1] * fy * y / z ** 2
                   + dl_dj[:, 0, 0] * (-fx / z ** 2)
                   + dl_dj[:, 1, 1] * (-fy / z ** 2)
                   + dl_dj[:, 0, 2] * (2 * fx * x / z ** 3)
                   + dl_dj[:, 1, 2] * (2 * fy * y / z ** 3)
                   + g_z)
    grads.positions[ids] = dl_dt @ camera.rotation

    # covariance -> (log-scale, quaternion)
    dl_dm = 2.0 * np.einsum("nij,njk->nik", dl_dsigma, m)
    dl_ds = np.einsum("nji,njk->nik", rot3, dl_dm)
    dl_ds = np.stack([dl_ds[:, 0, 0], dl_ds[:, 1, 1], dl_ds[:, 2, 2]], axis=1)
    grads.log_scales[ids] = dl_ds * scales

    dl_drot = dl_dm * scales[:, None, :]
    q_hat = scene.unit_rotations[ids]
    dl_dqhat = _quat_rotation_vjp(q_hat, dl_drot)
    raw_norm = np.linalg.norm(scene.rotations[ids], axis=1, keepdims=True)
    proj_out = dl_dqhat - np.sum(dl_dqhat * q_hat, axis=1, keepdims=True) * q_hat
    grads.rotations[ids] = proj_out / raw_norm

    # opacity logit and DC color
    alpha = proj.alpha
    grads.opacity_logits[ids] = g_alpha * alpha * (1.0 - alpha)
    grads.colors_dc[ids] = g_rgb * SH_C0
