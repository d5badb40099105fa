"""Scene data model: Gaussian splats, bounding boxes, and set operations.

A scene stores *pre-activation* parameters as flat numpy arrays
(struct-of-arrays), matching the on-disk PLY convention:

    opacity   -> logit, activated by sigmoid
    scale     -> log of per-axis stddev, activated by exp
    rotation  -> quaternion (w, x, y, z), normalized when used
    color     -> degree-0 SH coefficient, rgb = 0.5 + SH_C0 * f_dc
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

# DC spherical-harmonic basis constant: rgb = 0.5 + SH_C0 * f_dc
SH_C0 = 0.28209479177387814

TAG_BACKGROUND = 0
TAG_OBJECT = 1


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    """Normalize (..., 4) quaternions to unit norm."""
    q = np.asarray(quats, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion has zero or non-finite norm")
    return q / norm


def quaternions_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Convert unit quaternions (..., 4) in (w, x, y, z) order to (..., 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance R S S^T R^T from a unit quaternion and per-axis stddevs."""
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("build_covariance: non-finite input")
    if np.any(scale <= 0):
        raise InvalidParameterError("build_covariance: scale must be positive")
    rot = quaternions_to_matrices(normalize_quaternions(rotation))
    m = rot * scale[..., None, :]  # R @ diag(s)
    return m @ np.swapaxes(m, -1, -2)


# ---------------------------------------------------------------------------
# activation helpers
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def dc_to_rgb(dc):
    return 0.5 + SH_C0 * np.asarray(dc, dtype=np.float64)


def rgb_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class GaussianSplat:
    """One anisotropic Gaussian with *activated* parameters."""

    position: np.ndarray  # (3,) world units
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray     # (3,) per-axis stddev, > 0
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) rgb in [0, 1]

    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.scale)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in world frame, with optional yaw about the z axis."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    yaw_degrees: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "min_corner", np.asarray(self.min_corner, dtype=np.float64))
        object.__setattr__(self, "max_corner", np.asarray(self.max_corner, dtype=np.float64))
        if np.any(self.min_corner >= self.max_corner):
            raise InvalidParameterError("bounding box requires min < max per axis")

    @classmethod
    def from_center_extents(cls, center, extents, yaw_degrees: float = 0.0) -> "BoundingBox":
        center = np.asarray(center, dtype=np.float64)
        half = 0.5 * np.asarray(extents, dtype=np.float64)
        return cls(center - half, center + half, yaw_degrees)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean inside-test for (N, 3) points; margin inflates the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.yaw_degrees != 0.0:
            # rotate points into the box frame about the box center
            a = np.deg2rad(-self.yaw_degrees)
            c, s = np.cos(a), np.sin(a)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pts = (pts - self.center) @ rot.T + self.center
        lo = self.min_corner - margin
        hi = self.max_corner + margin
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def corners(self) -> np.ndarray:
        """The 8 world-frame corners, (8, 3)."""
        lo, hi = self.min_corner, self.max_corner
        pts = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
        if self.yaw_degrees != 0.0:
            a = np.deg2rad(self.yaw_degrees)
            c, s = np.cos(a), np.sin(a)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pts = (pts - self.center) @ rot.T + self.center
        return pts


@dataclass
class Scene:
    """An ordered set of splats with per-splat background/object tags.

    Treated as an immutable value everywhere except inside an optimizer
    loop, which owns its scene exclusively and mutates the arrays in place.
    """

    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) quaternion (w, x, y, z), pre-activation
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors_dc: np.ndarray       # (N, 3)
    tags: np.ndarray = None     # (N,) uint8, TAG_BACKGROUND / TAG_OBJECT
    bbox: BoundingBox | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64)).reshape(-1, 3)
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64)).reshape(-1, 4)
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64)).reshape(-1, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors_dc = np.atleast_2d(np.asarray(self.colors_dc, dtype=np.float64)).reshape(-1, 3)
        n = len(self.positions)
        if self.tags is None:
            self.tags = np.full(n, TAG_BACKGROUND, dtype=np.uint8)
        else:
            self.tags = np.asarray(self.tags, dtype=np.uint8).reshape(-1)
        shapes = (len(self.rotations), len(self.log_scales),
                  len(self.opacity_logits), len(self.colors_dc), len(self.tags))
        if any(s != n for s in shapes):
            raise InvalidParameterError("scene arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.positions)

    # -- activated views --------------------------------------------------

    @property
    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> np.ndarray:
        return dc_to_rgb(self.colors_dc)

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            position=self.positions[i].copy(),
            rotation=self.unit_rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    # -- construction ------------------------------------------------------

    @classmethod
    def empty(cls, bbox: BoundingBox | None = None) -> "Scene":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), z.copy(), np.zeros(0), z.copy(),
                   tags=np.zeros(0, dtype=np.uint8), bbox=bbox)

    @classmethod
    def from_splats(cls, splats, tags=None, bbox: BoundingBox | None = None) -> "Scene":
        if not splats:
            return cls.empty(bbox)
        pos = np.stack([s.position for s in splats])
        rot = np.stack([s.rotation for s in splats])
        log_s = np.log(np.stack([s.scale for s in splats]))
        logits = inverse_sigmoid(np.clip([s.opacity for s in splats], 1e-9, 1 - 1e-9))
        dc = rgb_to_dc(np.stack([s.color for s in splats]))
        return cls(pos, rot, log_s, logits, dc, tags=tags, bbox=bbox)

    def copy(self) -> "Scene":
        return Scene(self.positions.copy(), self.rotations.copy(),
                     self.log_scales.copy(), self.opacity_logits.copy(),
                     self.colors_dc.copy(), tags=self.tags.copy(), bbox=self.bbox)

    def select(self, index) -> "Scene":
        """New scene containing the indexed subset, order preserved."""
        return Scene(self.positions[index], self.rotations[index],
                     self.log_scales[index], self.opacity_logits[index],
                     self.colors_dc[index], tags=self.tags[index], bbox=self.bbox)

    def retagged(self, tag: int) -> "Scene":
        out = self.copy()
        out.tags[:] = tag
        return out

    def validate(self, bbox_margin: float = 0.0) -> None:
        """Raise if invariants are violated (tags, object splats inside bbox)."""
        if np.any((self.tags != TAG_BACKGROUND) & (self.tags != TAG_OBJECT)):
            raise InvalidParameterError("unknown splat tag")
        if self.bbox is not None:
            obj = self.positions[self.tags == TAG_OBJECT]
            if len(obj) and not np.all(self.bbox.contains(obj, margin=bbox_margin)):
                raise InvalidParameterError(
                    "object-tagged splat outside bounding box (+margin)")


# ---------------------------------------------------------------------------
# set operations
# ---------------------------------------------------------------------------

def excise_bbox(scene: Scene, bbox: BoundingBox) -> Scene:
    """Remove splats whose center lies inside the box; order preserved."""
    if len(scene) == 0:
        return scene.copy()
    keep = ~bbox.contains(scene.positions)
    out = scene.select(np.flatnonzero(keep))
    out.bbox = bbox
    return out


def merge_scenes(background: Scene, obj: Scene) -> Scene:
    """Concatenate two scenes, preserving per-splat tags and order."""
    bbox = obj.bbox if obj.bbox is not None else background.bbox
    return Scene(
        np.concatenate([background.positions, obj.positions]),
        np.concatenate([background.rotations, obj.rotations]),
        np.concatenate([background.log_scales, obj.log_scales]),
        np.concatenate([background.opacity_logits, obj.opacity_logits]),
        np.concatenate([background.colors_dc, obj.colors_dc]),
        tags=np.concatenate([background.tags, obj.tags]),
        bbox=bbox,
    )
