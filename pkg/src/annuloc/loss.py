"""Training losses: patch classification, offset regression, and the
neighboring-frame temporal consistency term.

The consistency term turns each frame's regression map into absolute
per-patch locations (patch center + inverted signed-log offset), chains them
with the predicted forward/backward displacements, and penalizes the L1
mismatch against the neighboring frames' own locations. Supervised losses
average over annotated frames only; the consistency loss averages over all
frames of a clip; videos are weighted equally.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import PredictionMaps
from .targets import PatchGrid, patch_centers

__all__ = [
    "DegenerateBatchError",
    "LossWeights",
    "LossBreakdown",
    "ClipBatch",
    "cls_loss",
    "reg_loss",
    "temp_loss",
    "temp_loss_clip",
    "total_loss",
]


class DegenerateBatchError(ValueError):
    """The batch supplies no frames that any loss term can use."""


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    temp: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return tuple(
            float(t.detach()) for t in (self.cls, self.reg, self.temp, self.total)
        )


def cls_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over patches (and any leading plane dims),
    computed in the numerically stable logit form."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, target)


def reg_loss(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """L1 regression loss, summed over the two offset components and averaged
    over masked patches. An all-zero mask yields exactly 0 (and no gradient).

    pred/target: (..., 2, gh, gw); mask: (..., gh, gw).
    """
    if pred.shape != target.shape or mask.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ValueError(
            f"shape mismatch pred {tuple(pred.shape)} target {tuple(target.shape)} "
            f"mask {tuple(mask.shape)}"
        )
    per_patch = (pred - target).abs().sum(dim=-3)
    n = mask.sum()
    if float(n) == 0.0:
        return torch.zeros((), dtype=pred.dtype)
    return (per_patch * mask).sum() / n


def _inv_signed_log(r: torch.Tensor) -> torch.Tensor:
    return torch.sign(r) * torch.expm1(r.abs())


def _centers_tensor(grid: PatchGrid, dtype) -> torch.Tensor:
    """(2, gh, gw) patch-center coordinates (x plane, y plane)."""
    c = patch_centers(grid)  # (gh, gw, 2)
    return torch.from_numpy(c).to(dtype).permute(2, 0, 1)


def temp_loss_clip(
    reg: torch.Tensor,
    disp_fwd: torch.Tensor,
    disp_bwd: torch.Tensor,
    grid: PatchGrid,
) -> torch.Tensor:
    """Temporal consistency loss of a whole clip.

    Tensors are (T, L, 2, gh, gw). Per frame t the loss sums, over x/y
    components, |d_t + fwd_t - d_{t+1}| and |d_t + bwd_t - d_{t-1}|, averaged
    over patches and landmarks; edge frames simply lack one of the two terms.
    The result is the mean of the per-frame values over all T frames.
    """
    t_frames = reg.shape[0]
    if disp_fwd.shape != reg.shape or disp_bwd.shape != reg.shape:
        raise ValueError("prediction map shapes disagree")
    if t_frames < 2:
        return torch.zeros((), dtype=reg.dtype)
    centers = _centers_tensor(grid, reg.dtype)
    d = centers + _inv_signed_log(reg)  # absolute per-patch locations (px)
    fwd = (d[:-1] + disp_fwd[:-1] - d[1:]).abs().sum(dim=2).mean(dim=(1, 2, 3))
    bwd = (d[1:] + disp_bwd[1:] - d[:-1]).abs().sum(dim=2).mean(dim=(1, 2, 3))
    pad = torch.zeros(1, dtype=reg.dtype)
    per_frame = torch.cat([fwd, pad]) + torch.cat([pad, bwd])
    return per_frame.mean()


def temp_loss(
    prev: PredictionMaps | None,
    cur: PredictionMaps,
    nxt: PredictionMaps | None,
    grid: PatchGrid,
) -> torch.Tensor:
    """Single-frame consistency loss given the neighboring frames'
    predictions (unbatched maps, (L, 2, gh, gw)). A missing neighbor at a
    clip edge drops that term."""
    centers = _centers_tensor(grid, cur.reg.dtype)
    d_cur = centers + _inv_signed_log(cur.reg)
    total = torch.zeros((), dtype=cur.reg.dtype)
    for neighbor, disp in ((nxt, cur.disp_fwd), (prev, cur.disp_bwd)):
        if neighbor is None:
            continue
        if neighbor.reg.shape != cur.reg.shape:
            raise ValueError("prediction map grids disagree")
        d_n = centers + _inv_signed_log(neighbor.reg)
        total = total + (d_cur + disp - d_n).abs().sum(dim=1).mean()
    return total


@dataclass
class ClipBatch:
    """Predictions and targets for one video clip.

    preds holds maps for every clip frame (batch dim = T). Targets cover the
    annotated frames only, in the order given by annotated_idx:
    cls_target (A, L, gh, gw), reg_target (A, L, 2, gh, gw),
    reg_mask (A, L, gh, gw).
    """

    preds: PredictionMaps
    annotated_idx: list[int]
    cls_target: torch.Tensor | None
    reg_target: torch.Tensor | None
    reg_mask: torch.Tensor | None


def total_loss(videos: list[ClipBatch], grid: PatchGrid,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Combine the loss terms over a batch of clips.

    Classification and regression are averaged over each video's annotated
    frames and then over videos that have any; the consistency term is
    averaged over all frames of every video. total = cls + reg + beta * temp.
    """
    if not videos:
        raise DegenerateBatchError("empty batch")
    if all(not v.annotated_idx for v in videos) and weights.beta == 0:
        raise DegenerateBatchError(
            "no annotated frames in any video and beta = 0: the loss is empty"
        )
    cls_terms, reg_terms, temp_terms = [], [], []
    for v in videos:
        temp_terms.append(
            temp_loss_clip(v.preds.reg, v.preds.disp_fwd, v.preds.disp_bwd, grid)
        )
        if not v.annotated_idx:
            continue
        idx = torch.as_tensor(v.annotated_idx, dtype=torch.long)
        logits = v.preds.cls_logits[idx]
        cls_terms.append(cls_loss(logits, v.cls_target))
        # Per-frame masked mean, then average over annotated frames.
        frame_regs = [
            reg_loss(v.preds.reg[i], v.reg_target[k], v.reg_mask[k])
            for k, i in enumerate(v.annotated_idx)
        ]
        reg_terms.append(torch.stack(frame_regs).mean())

    zero = torch.zeros(())
    cls = torch.stack(cls_terms).mean() if cls_terms else zero
    reg = torch.stack(reg_terms).mean() if reg_terms else zero
    temp = torch.stack(temp_terms).mean()
    total = cls + reg + weights.beta * temp
    return LossBreakdown(cls=cls, reg=reg, temp=temp, total=total)
