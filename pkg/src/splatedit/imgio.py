"""Image export helpers and bounding-box mask projection."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .camera import Camera
from .scene import BoundingBox


def save_color_png(image: np.ndarray, path) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask_png(mask: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(mask) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_depth_png16(depth: np.ndarray, path, near: float, far: float) -> None:
    """Save a depth image as 16-bit PNG, linearly mapping near->0, far->65535."""
    scaled = (np.asarray(depth) - near) / max(far - near, 1e-12)
    arr = np.clip(scaled * 65535.0 + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def image_grid(images, columns: int) -> np.ndarray:
    """Tile equally-sized (H, W, 3) images into a grid, row-major."""
    images = list(images)
    h, w, _ = images[0].shape
    rows = (len(images) + columns - 1) // columns
    grid = np.zeros((rows * h, columns * w, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain over (N, 2) points."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                    (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                    - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def project_bbox_mask(bbox: BoundingBox, camera: Camera) -> np.ndarray:
    """Binary (H, W) mask of the bounding box's projected convex hull."""
    corners = bbox.corners()
    cam_pts = camera.world_to_camera(corners)
    z = np.maximum(cam_pts[:, 2], camera.near)  # clamp corners behind camera
    if np.all(cam_pts[:, 2] <= camera.near):
        return np.zeros((camera.height, camera.width))
    u = camera.fx * cam_pts[:, 0] / z + camera.cx
    v = camera.fy * cam_pts[:, 1] / z + camera.cy
    hull = _convex_hull(np.stack([u, v], axis=1))
    img = Image.new("L", (camera.width, camera.height), 0)
    ImageDraw.Draw(img).polygon([(float(x), float(y)) for x, y in hull],
                                fill=1, outline=1)
    return np.asarray(img, dtype=np.float64)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    diff = (np.asarray(a) - np.asarray(b)) ** 2
    if mask is not None:
        sel = np.asarray(mask) > 0.5
        mse = diff[sel].mean() if sel.any() else 0.0
    else:
        mse = diff.mean()
    if mse <= 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))
