"""Patch-grid classification/regression targets for landmark annotations.

The network classifies, for every patch of a stride-downsampled grid,
whether it contains the landmark, and regresses the signed-log displacement
from the patch center to the landmark. Absent landmarks get an all-zero
classification target and are excluded from the regression loss via the
mask plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnnotationError",
    "PatchGrid",
    "TargetMaps",
    "patch_center",
    "patch_centers",
    "signed_log",
    "signed_log_inv",
    "build_targets",
]


class AnnotationError(ValueError):
    """An annotation violates the target-building contract."""


@dataclass(frozen=True)
class PatchGrid:
    stride: int
    grid_h: int
    grid_w: int

    @property
    def image_h(self) -> int:
        return self.stride * self.grid_h

    @property
    def image_w(self) -> int:
        return self.stride * self.grid_w


@dataclass(frozen=True)
class TargetMaps:
    """One landmark plane: cls (gh, gw) in {0,1}, reg (2, gh, gw) signed-log
    x/y displacements, reg_mask (gh, gw) in {0,1}."""

    cls: np.ndarray
    reg: np.ndarray
    reg_mask: np.ndarray


def patch_center(grid: PatchGrid, i: int, j: int) -> tuple[float, float]:
    """Center (x, y) of patch at row i, column j."""
    if not (0 <= i < grid.grid_h and 0 <= j < grid.grid_w):
        raise IndexError(f"patch ({i}, {j}) outside {grid.grid_h}x{grid.grid_w} grid")
    return ((j + 0.5) * grid.stride, (i + 0.5) * grid.stride)


def patch_centers(grid: PatchGrid) -> np.ndarray:
    """(grid_h, grid_w, 2) array of patch-center (x, y) coordinates."""
    ii, jj = np.mgrid[0 : grid.grid_h, 0 : grid.grid_w]
    return np.stack(
        [(jj + 0.5) * grid.stride, (ii + 0.5) * grid.stride], axis=-1
    ).astype(float)


def signed_log(v):
    """sign(v) * ln(1 + |v|), elementwise."""
    v = np.asarray(v, dtype=float)
    out = np.sign(v) * np.log1p(np.abs(v))
    return float(out) if out.ndim == 0 else out


def signed_log_inv(r):
    """Inverse of :func:`signed_log`: sign(r) * (exp(|r|) - 1)."""
    r = np.asarray(r, dtype=float)
    out = np.sign(r) * np.expm1(np.abs(r))
    return float(out) if out.ndim == 0 else out


def build_targets(landmark, grid: PatchGrid) -> TargetMaps:
    """Build one landmark's target plane.

    ``landmark`` is an (x, y) point or None for an absent landmark. Patch
    ownership uses half-open intervals [k*stride, (k+1)*stride).
    """
    cls = np.zeros((grid.grid_h, grid.grid_w), dtype=np.float32)
    reg = np.zeros((2, grid.grid_h, grid.grid_w), dtype=np.float32)
    mask = np.zeros((grid.grid_h, grid.grid_w), dtype=np.float32)
    if landmark is None:
        return TargetMaps(cls=cls, reg=reg, reg_mask=mask)

    x, y = float(landmark[0]), float(landmark[1])
    if not (0.0 <= x < grid.image_w and 0.0 <= y < grid.image_h):
        raise AnnotationError(
            f"landmark ({x}, {y}) outside {grid.image_w}x{grid.image_h} image"
        )
    j = int(x // grid.stride)
    i = int(y // grid.stride)
    cls[i, j] = 1.0
    centers = patch_centers(grid)
    reg[0] = signed_log(x - centers[..., 0])
    reg[1] = signed_log(y - centers[..., 1])
    mask[:] = 1.0
    return TargetMaps(cls=cls, reg=reg, reg_mask=mask)
