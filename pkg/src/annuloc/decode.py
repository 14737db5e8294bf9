"""Decoding prediction maps to landmark coordinates and presence decisions.

The landmark location is the mean of the per-patch regressed locations,
weighted by the per-patch classification probabilities. Presence is decided
by thresholding the maximum patch probability; the threshold is calibrated
to maximize accuracy on a validation set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .targets import PatchGrid, patch_centers, signed_log_inv

__all__ = [
    "CalibrationError",
    "Detection",
    "Threshold",
    "weighted_mean",
    "detect",
    "calibrate",
]


class CalibrationError(ValueError):
    """Threshold calibration received unusable input."""


@dataclass(frozen=True)
class Detection:
    point: tuple[float, float] | None
    max_prob: float


@dataclass(frozen=True)
class Threshold:
    tau: float
    accuracy: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def weighted_mean(
    maps, landmark_index: int, grid: PatchGrid
) -> tuple[tuple[float, float] | None, float]:
    """Probability-weighted mean of the per-patch regressed locations for one
    landmark plane. Returns (point, max_prob); if the total probability mass
    is below 1e-12 the point is None and max_prob 0."""
    logits = np.asarray(maps.cls_logits, dtype=float)[landmark_index]
    reg = np.asarray(maps.reg, dtype=float)[landmark_index]
    if logits.shape != (grid.grid_h, grid.grid_w):
        raise ValueError(
            f"grid mismatch: maps {logits.shape} vs ({grid.grid_h}, {grid.grid_w})"
        )
    probs = _sigmoid(logits)
    centers = patch_centers(grid)  # (gh, gw, 2)
    locs = centers + np.moveaxis(signed_log_inv(reg), 0, -1)
    total = probs.sum()
    if total < 1e-12:
        return None, 0.0
    point = (probs[..., None] * locs).sum(axis=(0, 1)) / total
    return (float(point[0]), float(point[1])), float(probs.max())


def detect(maps, landmark_index: int, grid: PatchGrid, tau: float) -> Detection:
    """Decode one landmark; the point is withheld when the maximum patch
    probability falls below tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    point, max_prob = weighted_mean(maps, landmark_index, grid)
    if point is None or max_prob < tau:
        return Detection(point=None, max_prob=max_prob)
    return Detection(point=point, max_prob=max_prob)


def calibrate(max_probs, present_labels) -> Threshold:
    """Choose the presence threshold maximizing accuracy over (max_prob,
    present) validation pairs. Candidates are 0, 1, and all midpoints
    between sorted distinct probabilities; ties break toward the smaller
    tau."""
    probs = np.asarray(max_probs, dtype=float)
    labels = np.asarray(present_labels, dtype=int)
    if probs.size == 0 or probs.shape != labels.shape:
        raise CalibrationError("need equal-length nonempty prob/label lists")
    distinct = np.unique(probs)
    candidates = np.concatenate([[0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]])
    best_tau, best_acc = 0.0, -1.0
    for tau in candidates:
        acc = float(np.mean((probs >= tau).astype(int) == labels))
        if acc > best_acc:
            best_tau, best_acc = float(tau), acc
    return Threshold(tau=best_tau, accuracy=best_acc)
