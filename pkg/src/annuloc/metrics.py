"""Evaluation metrics: landmark MAE, annulus size, MAPSE, mean absolute
jerk, and ROC-AUC for missing-landmark recognition.

MAPSE follows the clinical definition: the ED-to-ES displacement of the
annulus midpoint projected onto the time-averaged normal of the annular
line, with the normal oriented toward the apex (negative image-y) so that
systolic motion toward the apex is positive.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "Trajectory",
    "EvalReport",
    "landmark_mae",
    "annulus_size",
    "mapse",
    "mean_jerk",
    "roc_auc",
    "paired_ttest",
    "write_trajectory",
    "read_trajectory",
]


class UndefinedMetricError(ValueError):
    """The metric has no valid instances to aggregate."""


@dataclass
class Trajectory:
    """Per-frame decoded landmark pairs with presence probabilities."""

    left: list  # per frame: (x, y) or None
    right: list
    left_prob: list  # floats, 0.0 where withheld
    right_prob: list
    spacing: float
    ed_frames: list = field(default_factory=list)
    es_frames: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.left)


@dataclass
class EvalReport:
    landmark_mae_mm: float
    annulus_size_mae_mm: float
    mapse_mae_mm: float
    mean_jerk_mm_per_frame3: float
    roc_auc: float | None
    per_video: list
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "landmark_mae_mm": self.landmark_mae_mm,
            "annulus_size_mae_mm": self.annulus_size_mae_mm,
            "mapse_mae_mm": self.mapse_mae_mm,
            "mean_jerk_mm_per_frame3": self.mean_jerk_mm_per_frame3,
            "roc_auc": self.roc_auc,
            "per_video": self.per_video,
            "seed": self.seed,
        }

    def csv_row(self) -> dict:
        d = self.to_dict()
        d.pop("per_video")
        return d


def landmark_mae(pred: Trajectory, gt) -> float:
    """Mean Euclidean error (mm) over annotated frames and landmarks present
    in both prediction and ground truth."""
    if len(pred) != len(gt.left):
        raise ValueError("trajectory lengths differ")
    errs = []
    for t in gt.annotated:
        for p, g in ((pred.left[t], gt.left[t]), (pred.right[t], gt.right[t])):
            if p is not None and g is not None:
                errs.append(np.hypot(p[0] - g[0], p[1] - g[1]))
    if not errs:
        raise UndefinedMetricError("no comparable landmark instances")
    return float(np.mean(errs) * pred.spacing)


def annulus_size(left, right, spacing: float) -> float:
    """Distance (mm) between the two annulus landmarks."""
    if left is None or right is None:
        raise UndefinedMetricError("annulus size undefined with an absent landmark")
    return float(np.hypot(right[0] - left[0], right[1] - left[1]) * spacing)


def _annulus_frames(traj: Trajectory):
    for t in range(len(traj)):
        if traj.left[t] is not None and traj.right[t] is not None:
            yield t, np.asarray(traj.left[t], float), np.asarray(traj.right[t], float)


def mapse(traj: Trajectory, ed: int, es: int) -> float:
    """Systolic excursion (mm) of the annulus midpoint from frame ``ed`` to
    frame ``es``, projected onto the time-averaged annular-plane normal
    (oriented toward the apex, i.e. negative image-y)."""
    normals = []
    for t, left, right in _annulus_frames(traj):
        u = right - left
        norm = np.hypot(*u)
        if norm < 1e-12:
            continue  # degenerate frame: skip from the average
        u /= norm
        n = np.array([-u[1], u[0]])
        if n[1] > 0 or (n[1] == 0 and n[0] < 0):
            n = -n  # orient toward the apex (negative image-y hemisphere)
        normals.append(n)
    if not normals:
        raise UndefinedMetricError("no frames with a well-defined annular normal")
    n_bar = np.mean(normals, axis=0)
    n_norm = np.hypot(*n_bar)
    if n_norm < 1e-12:
        raise UndefinedMetricError("time-averaged normal degenerates to zero")
    n_bar /= n_norm

    def midpoint(t: int) -> np.ndarray:
        if traj.left[t] is None or traj.right[t] is None:
            raise UndefinedMetricError(f"landmark absent at frame {t}")
        return (np.asarray(traj.left[t], float) + np.asarray(traj.right[t], float)) / 2.0

    # Motion toward the apex during systole projects positively onto n_bar.
    return float((midpoint(es) - midpoint(ed)) @ n_bar * traj.spacing)


def mean_jerk(traj: Trajectory) -> float:
    """Mean absolute jerk (mm/frame^3): the forward third difference
    p[t+3] - 3 p[t+2] + 3 p[t+1] - p[t], evaluated on every run of four
    consecutive frames where the landmark is present, averaged over both
    landmarks."""
    mags = []
    for series in (traj.left, traj.right):
        pts = [None if p is None else np.asarray(p, float) for p in series]
        for t in range(len(pts) - 3):
            window = pts[t : t + 4]
            if any(p is None for p in window):
                continue
            j = window[3] - 3 * window[2] + 3 * window[1] - window[0]
            mags.append(np.hypot(*j))
    if not mags:
        raise UndefinedMetricError("no run of 4 consecutive present frames")
    return float(np.mean(mags) * traj.spacing)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted one half (rank / Mann-Whitney form)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ValueError("need equal-length nonempty score/label lists")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes")
    from scipy.stats import rankdata

    ranks = rankdata(scores)  # midranks handle ties
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    from scipy.stats import ttest_rel

    res = ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------

def _det_json(p, prob):
    if p is None:
        return None
    return {"x": float(p[0]), "y": float(p[1]), "prob": float(prob)}


def write_trajectory(path, traj: Trajectory) -> None:
    doc = {
        "spacing": traj.spacing,
        "ed": list(traj.ed_frames),
        "es": list(traj.es_frames),
        "frames": [
            {
                "index": t,
                "left": _det_json(traj.left[t], traj.left_prob[t]),
                "right": _det_json(traj.right[t], traj.right_prob[t]),
            }
            for t in range(len(traj))
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_trajectory(path) -> Trajectory:
    with open(path) as f:
        doc = json.load(f)
    frames = sorted(doc["frames"], key=lambda fr: fr["index"])

    def split(key):
        pts, probs = [], []
        for fr in frames:
            d = fr[key]
            if d is None:
                pts.append(None)
                probs.append(0.0)
            else:
                pts.append((float(d["x"]), float(d["y"])))
                probs.append(float(d["prob"]))
        return pts, probs

    left, left_prob = split("left")
    right, right_prob = split("right")
    return Trajectory(
        left=left, right=right, left_prob=left_prob, right_prob=right_prob,
        spacing=float(doc["spacing"]), ed_frames=list(doc["ed"]),
        es_frames=list(doc["es"]),
    )


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
        f.write("\n")


def append_report_csv(path, report: EvalReport) -> None:
    row = report.csv_row()
    new = not (os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)
