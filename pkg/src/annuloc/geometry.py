"""Sector field-of-view geometry and similarity transforms.

Coordinates are image pixels, x to the right and y downward. The sector is
the region reachable from the apex within ``half_angle`` of the centerline
direction ``axis_angle`` (atan2 convention, so straight down is pi/2) and
with radius in [r_min, r_max]. Boundary points count as inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "SectorGeometry",
    "SimilarityTransform",
    "contains",
    "sector_mask",
    "apply_transform",
    "inverse",
    "identity_transform",
]


@dataclass(frozen=True)
class SectorGeometry:
    apex: tuple[float, float]
    half_angle: float
    r_min: float
    r_max: float
    height: int
    width: int
    axis_angle: float = math.pi / 2

    def __post_init__(self) -> None:
        if not 0.0 < self.half_angle < math.pi / 2:
            raise ValueError(f"half_angle must be in (0, pi/2), got {self.half_angle}")
        # r_min == r_max is tolerated as a degenerate (empty) sector.
        if not 0.0 <= self.r_min <= self.r_max:
            raise ValueError(f"need 0 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("height and width must be positive")

    def to_dict(self) -> dict:
        return {
            "apex_x": self.apex[0],
            "apex_y": self.apex[1],
            "half_angle": self.half_angle,
            "axis_angle": self.axis_angle,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "height": self.height,
            "width": self.width,
        }

    @staticmethod
    def from_dict(d: dict) -> "SectorGeometry":
        return SectorGeometry(
            apex=(float(d["apex_x"]), float(d["apex_y"])),
            half_angle=float(d["half_angle"]),
            axis_angle=float(d["axis_angle"]),
            r_min=float(d["r_min"]),
            r_max=float(d["r_max"]),
            height=int(d["height"]),
            width=int(d["width"]),
        )


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap angles to (-pi, pi]."""
    return np.mod(a + np.pi, 2.0 * np.pi) - np.pi


def contains(geom: SectorGeometry, p) -> bool | np.ndarray:
    """Whether point(s) ``p`` lie inside the sector (boundary inclusive).

    ``p`` may be a single (x, y) pair or an (..., 2) array; the return type
    matches (scalar bool or boolean array).
    """
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 1
    dx = p[..., 0] - geom.apex[0]
    dy = p[..., 1] - geom.apex[1]
    r = np.hypot(dx, dy)
    dev = np.abs(_wrap_angle(np.arctan2(dy, dx) - geom.axis_angle))
    inside = (r >= geom.r_min) & (r <= geom.r_max) & (dev <= geom.half_angle)
    # The apex itself has no defined angle; it is inside iff r_min == 0.
    at_apex = r < 1e-12
    inside = np.where(at_apex, geom.r_min == 0.0, inside)
    return bool(inside) if scalar else inside


def sector_mask(geom: SectorGeometry) -> np.ndarray:
    """Binary (height, width) mask; pixel (x, y) is 1 iff its center
    (x+0.5, y+0.5) is inside the sector."""
    ys, xs = np.mgrid[0 : geom.height, 0 : geom.width]
    pts = np.stack([xs + 0.5, ys + 0.5], axis=-1)
    return contains(geom, pts).astype(np.uint8)


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotate by ``rotation`` about ``pivot``, then scale by ``scale`` about
    the same pivot. scale > 1 zooms in."""

    scale: float
    rotation: float
    pivot: tuple[float, float]

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.rotation == 0.0

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (A, b) with p' = A @ p + b, in (x, y) coordinates."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        a = self.scale * np.array([[c, -s], [s, c]])
        piv = np.asarray(self.pivot, dtype=float)
        b = piv - a @ piv
        return a, b


def identity_transform(pivot=(0.0, 0.0)) -> SimilarityTransform:
    return SimilarityTransform(scale=1.0, rotation=0.0, pivot=pivot)


def inverse(t: SimilarityTransform) -> SimilarityTransform:
    return replace(t, scale=1.0 / t.scale, rotation=-t.rotation)


def apply_transform(t: SimilarityTransform, p) -> np.ndarray:
    """Map point(s) through the transform; accepts (2,) or (..., 2)."""
    a, b = t.matrix()
    p = np.asarray(p, dtype=float)
    return p @ a.T + b
