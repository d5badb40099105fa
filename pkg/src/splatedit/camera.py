"""Pinhole camera with a world-to-camera rigid pose.

Convention: camera looks down +z, x right, y down (image coordinates).
Pixel (row, col) has its center at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world->cam
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not self.near < self.far:
            raise InvalidParameterError("near must be less than far")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise InvalidParameterError(
                f"pose rotation not orthonormal (deviation {err:.2e})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.rotation[2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray):
        """Project (N, 3) world points; returns pixel coords (N, 2) and depth z."""
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


def look_at(position, target, up=(0.0, 0.0, 1.0), *, fx, fy, cx, cy,
            width, height, near=0.01, far=100.0) -> Camera:
    """Camera at `position` with optical axis through `target`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - position
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise InvalidParameterError("look_at: position equals target")
    fwd = fwd / norm
    right = np.cross(fwd, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise InvalidParameterError("look_at: up vector parallel to view direction")
    right = right / rnorm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera x, y, z in world coords
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  rotation=rot, translation=-rot @ position, near=near, far=far)


def simple_camera(width: int, height: int, fov_degrees: float = 50.0,
                  **kwargs) -> dict:
    """Intrinsics dict for a centered pinhole with the given horizontal FOV."""
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_degrees))
    return dict(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                width=width, height=height, **kwargs)
