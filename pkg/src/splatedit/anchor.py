"""Anchor view selection by illumination contrast.

Renders of an azimuth camera ring are converted to the HSV value channel;
each view is scored by the left/right brightness ratio after rotating the
image through a predefined angle set, and the view with the strongest
contrast (|ratio - 0.5|) wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, look_at
from .errors import DegenerateInputError, InvalidParameterError

DEFAULT_ROTATION_SET = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)


@dataclass(frozen=True)
class AzimuthRing:
    """Camera ring around a point: equal azimuth spacing, fixed elevation."""

    center: np.ndarray
    radius: float
    elevation_degrees: float
    count: int
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64))
        if self.count < 2:
            raise InvalidParameterError("azimuth ring needs at least 2 views")
        if self.radius <= 0:
            raise InvalidParameterError("azimuth ring radius must be positive")

    @property
    def azimuth_step_degrees(self) -> float:
        return 360.0 / self.count

    def position(self, k: int) -> np.ndarray:
        az = np.deg2rad(k * self.azimuth_step_degrees)
        el = np.deg2rad(self.elevation_degrees)
        offset = self.radius * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return self.center + offset


@dataclass
class ViewScore:
    view_index: int
    best_rotation: float  # degrees; rotation minimizing the ratio
    ratio: float          # ratio at best_rotation, in [0, 1]
    contrast: float       # max over rotations of |ratio - 0.5|


def sample_ring(ring: AzimuthRing, *, fx, fy, cx, cy, width, height,
                near=0.01, far=100.0) -> list[Camera]:
    """Cameras on the ring, each looking at the ring center."""
    return [look_at(ring.position(k), ring.center, ring.up,
                    fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                    near=near, far=far)
            for k in range(ring.count)]


def value_channel(image: np.ndarray) -> np.ndarray:
    """HSV value channel of an RGB image: per-pixel max over channels."""
    return np.asarray(image, dtype=np.float64).max(axis=-1)


def rotate_image(image: np.ndarray, degrees: float):
    """Nearest-neighbor rotation about the image center.

    Returns (rotated, valid) where `valid` marks pixels whose source lies
    inside the frame. Round-half-even makes the map symmetric under
    180-degree composition.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = np.deg2rad(-degrees)  # inverse map
    cos_a, sin_a = np.cos(a), np.sin(a)
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = np.rint(cos_a * rr - sin_a * cc + cy).astype(int)
    src_c = np.rint(sin_a * rr + cos_a * cc + cx).astype(int)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(img)
    out[valid] = img[src_r[valid], src_c[valid]]
    return out, valid


def _half_columns(width: int):
    """Left/right column masks; the exact middle column of odd widths is
    excluded from both halves to keep the 180-degree symmetry exact."""
    cols = np.arange(width)
    return cols < width // 2, cols >= (width + 1) // 2


def brightness_ratio(v: np.ndarray, rotation: float,
                     fg_mask: np.ndarray | None = None,
                     rotation_set=DEFAULT_ROTATION_SET) -> float:
    """mean(left V) / (mean(left V) + mean(right V)) after rotating the value
    image; 0.5 when both halves are empty or equal."""
    if rotation not in rotation_set:
        raise InvalidParameterError(
            f"rotation {rotation} not in configured set {tuple(rotation_set)}")
    v = np.asarray(v, dtype=np.float64)
    mask = np.ones(v.shape, dtype=bool) if fg_mask is None \
        else np.asarray(fg_mask).astype(bool)

    v_rot, valid = rotate_image(v, rotation)
    m_rot, _ = rotate_image(mask.astype(np.float64), rotation)
    sel = valid & (m_rot > 0.5)
    if not sel.any():
        raise DegenerateInputError("brightness_ratio: empty mask after rotation")

    left_cols, right_cols = _half_columns(v.shape[1])
    left = sel & left_cols[None, :]
    right = sel & right_cols[None, :]
    mean_left = v_rot[left].mean() if left.any() else 0.0
    mean_right = v_rot[right].mean() if right.any() else 0.0
    total = mean_left + mean_right
    if total == 0.0:
        return 0.5
    return float(mean_left / total)


def score_view(v: np.ndarray, view_index: int,
               rotation_set=DEFAULT_ROTATION_SET,
               fg_mask: np.ndarray | None = None,
               bright_side: str = "right") -> ViewScore:
    """Contrast score of one value-channel image. `bright_side` picks the
    reported rotation: "right" reports the ratio-minimizing rotation (left
    side darkest), "left" the maximizing one."""
    if bright_side not in ("left", "right"):
        raise InvalidParameterError("bright_side must be 'left' or 'right'")
    ratios = [brightness_ratio(v, r, fg_mask, rotation_set)
              for r in rotation_set]
    contrast = max(abs(r - 0.5) for r in ratios)
    best = int(np.argmin(ratios) if bright_side == "right"
               else np.argmax(ratios))
    return ViewScore(view_index=view_index,
                     best_rotation=float(rotation_set[best]),
                     ratio=float(ratios[best]), contrast=float(contrast))


def score_views(views, rotation_set=DEFAULT_ROTATION_SET, fg_masks=None,
                bright_side: str = "right") -> list[ViewScore | None]:
    """Score every (Camera, RenderOutput) pair; fully-masked views score None."""
    scores = []
    for i, (_, out) in enumerate(views):
        mask = None if fg_masks is None else fg_masks[i]
        try:
            scores.append(score_view(value_channel(out.color), i,
                                     rotation_set, mask, bright_side))
        except DegenerateInputError:
            scores.append(None)
    return scores


def propose_anchor(views, rotation_set=DEFAULT_ROTATION_SET,
                   fg_masks=None, bright_side: str = "right") -> ViewScore:
    """Pick the view whose value-channel image shows the strongest rotated
    left/right contrast; ties go to the lowest view index.

    `views` is a list of (Camera, RenderOutput); `fg_masks` optionally
    restricts scoring to foreground pixels per view.
    """
    if len(views) < 2:
        raise InvalidParameterError("propose_anchor needs at least 2 views")
    scores = score_views(views, rotation_set, fg_masks, bright_side)
    valid = [s for s in scores if s is not None]
    if not valid:
        raise DegenerateInputError("propose_anchor: all views fully masked")
    return max(valid, key=lambda s: (s.contrast, -s.view_index))
