"""Field-of-view-preserving zoom/rotation augmentation.

One similarity transform is sampled per clip and applied to every frame, so
the temporal structure of the clip survives. Frames are inverse-warped with
bilinear sampling and re-masked by the original sector geometry; landmarks
are mapped through the same transform and marked absent when they leave the
sector, which is what teaches the model to recognize missing landmarks.

``augment_clip_plain`` is the ablation variant: a regular zoom/rotation
about the image center that keeps visibility tied to the image bounds only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import affine_transform

from .geometry import (
    SimilarityTransform,
    apply_transform,
    contains,
    identity_transform,
    inverse,
    sector_mask,
)
from .synthvideo import GroundTruth, VideoClip

__all__ = [
    "FovAugmentConfig",
    "sample_transform",
    "warp_frame",
    "augment_clip",
    "augment_clip_plain",
]


@dataclass(frozen=True)
class FovAugmentConfig:
    max_zoom: float = 1.5
    max_rotation: float = np.deg2rad(15.0)
    probability: float = 1.0
    mode: str = "fov"  # "fov" or "plain" (ablation)

    def __post_init__(self) -> None:
        if self.max_zoom < 1.0:
            raise ValueError(f"max_zoom must be >= 1, got {self.max_zoom}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")
        if self.mode not in ("fov", "plain"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


def sample_transform(
    cfg: FovAugmentConfig, rng: np.random.Generator, pivot
) -> SimilarityTransform:
    """Draw scale ~ U[1, max_zoom] and rotation ~ U[-max_rotation,
    +max_rotation] about the given pivot; with probability (1 - probability)
    return the identity instead. The rng is always advanced by the same
    amount, so downstream draws stay aligned across the two branches."""
    take = rng.uniform() < cfg.probability
    scale = rng.uniform(1.0, cfg.max_zoom)
    rotation = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    if not take:
        return identity_transform(pivot=tuple(pivot))
    return SimilarityTransform(scale=scale, rotation=rotation, pivot=tuple(pivot))


def warp_frame(frame: np.ndarray, t: SimilarityTransform) -> np.ndarray:
    """Inverse-warp a (H, W) frame through the transform with bilinear
    sampling and zero fill, honoring pixel centers at (x+0.5, y+0.5)."""
    a, b = inverse(t).matrix()
    swap = np.array([[0, 1], [1, 0]])
    m_yx = swap @ a @ swap
    half = np.array([0.5, 0.5])
    off_xy = a @ half + b - half
    return affine_transform(
        frame, m_yx, offset=off_xy[::-1], order=1, mode="constant", cval=0.0,
        output=np.float32 if frame.dtype == np.float32 else None,
    )


def _map_landmarks(points, t: SimilarityTransform, visible_fn):
    out = []
    for p in points:
        if p is None:
            out.append(None)
            continue
        q = apply_transform(t, p)
        out.append(tuple(q) if visible_fn(q) else None)
    return out


def augment_clip(
    clip: VideoClip, gt: GroundTruth, t: SimilarityTransform
) -> tuple[VideoClip, GroundTruth]:
    """Apply one transform to all frames and landmarks of a clip, re-masking
    by the original sector geometry. Mapped landmarks that fall outside the
    sector become absent."""
    geom = clip.geometry
    if t.is_identity:
        return clip, gt
    mask = sector_mask(geom).astype(clip.frames.dtype)
    frames = np.stack([warp_frame(f, t) * mask for f in clip.frames])
    visible = lambda q: bool(contains(geom, q))
    new_gt = replace(
        gt,
        left=_map_landmarks(gt.left, t, visible),
        right=_map_landmarks(gt.right, t, visible),
    )
    return VideoClip(frames=frames, spacing=clip.spacing, geometry=geom), new_gt


def augment_clip_plain(
    clip: VideoClip, gt: GroundTruth, t: SimilarityTransform
) -> tuple[VideoClip, GroundTruth]:
    """Ablation augmentation: same warp, but no sector re-mask; landmark
    visibility only requires staying inside the image bounds."""
    if t.is_identity:
        return clip, gt
    h, w = clip.frames.shape[1:]
    frames = np.stack([warp_frame(f, t) for f in clip.frames])
    visible = lambda q: 0.0 <= q[0] < w and 0.0 <= q[1] < h
    new_gt = replace(
        gt,
        left=_map_landmarks(gt.left, t, visible),
        right=_map_landmarks(gt.right, t, visible),
    )
    return VideoClip(frames=frames, spacing=clip.spacing, geometry=clip.geometry), new_gt
