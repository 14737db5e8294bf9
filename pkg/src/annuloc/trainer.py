"""Training and evaluation orchestration.

Each iteration samples a batch of videos, cuts a clip of consecutive frames
around a random annotated frame from each, applies one zoom/rotation
augmentation per clip, runs the network on every frame, and optimizes the
combined loss: supervised terms on the annotated frames, the temporal
consistency term on all clip frames. Evaluation runs the network over full
videos, decodes thresholded detections, and aggregates the clinical metric
suite per video.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import metrics as metrics_mod
from .augment import FovAugmentConfig, augment_clip, augment_clip_plain, sample_transform
from .decode import Threshold, calibrate, detect
from .loss import ClipBatch, LossBreakdown, LossWeights, total_loss
from .metrics import EvalReport, Trajectory, UndefinedMetricError
from .model import (
    Checkpoint,
    LandmarkNet,
    ModelConfig,
    checkpoint_from_model,
    init_model,
    model_from_checkpoint,
)
from .synthvideo import GroundTruth, VideoClip
from .targets import PatchGrid, build_targets

__all__ = [
    "TrainConfigError",
    "SamplingError",
    "NumericError",
    "TrainConfig",
    "OptimizerState",
    "sample_clip",
    "adam_step",
    "train",
    "evaluate",
    "aggregate_report",
    "trajectory_from_gt",
    "calibrate_checkpoint",
    "split_validation",
]


class TrainConfigError(ValueError):
    """Invalid training configuration."""


class SamplingError(ValueError):
    """A clip cannot be sampled from this video."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_videos: int = 4
    clip_length: int = 30
    learning_rate: float = 1e-4
    beta: float = 0.5
    seeds: tuple = (0, 1, 2, 3, 4)
    augmentation: FovAugmentConfig = field(default_factory=FovAugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    threads: int = 1

    def validate(self) -> None:
        if self.iterations < 0:
            raise TrainConfigError("iterations must be >= 0")
        if self.batch_videos < 1:
            raise TrainConfigError("batch_videos must be >= 1")
        if self.clip_length < 3:
            raise TrainConfigError("clip_length must be >= 3")
        if self.learning_rate <= 0:
            raise TrainConfigError("learning_rate must be positive")
        if self.beta < 0:
            raise TrainConfigError("beta must be >= 0")
        if not self.seeds:
            raise TrainConfigError("need at least one seed")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros_like(params: dict) -> "OptimizerState":
        return OptimizerState(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict, grads: dict, state: OptimizerState, lr: float
) -> tuple[dict, OptimizerState]:
    """One bias-corrected Adam update. Pure: returns fresh tensors."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient in tensor {name!r}")
            m = b1 * state.m[name] + (1 - b1) * g
            v = b2 * state.v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            new_params[name] = p - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
            new_m[name], new_v[name] = m, v
    return new_params, replace(
        state, m=new_m, v=new_v, step=step
    )


def sample_clip(
    clip: VideoClip, gt: GroundTruth, clip_length: int, rng: np.random.Generator
) -> tuple[VideoClip, GroundTruth, int]:
    """Cut a clip of consecutive frames centered on a random annotated frame
    (window clamped to the video). Returns the sub-clip, its ground-truth
    slice, and the start frame in the original video."""
    t_total = len(gt.left)
    if not gt.annotated:
        raise SamplingError("video has no annotated frames")
    anchor = int(rng.choice(np.asarray(gt.annotated)))
    length = min(clip_length, t_total)
    start = int(np.clip(anchor - length // 2, 0, t_total - length))
    end = start + length
    sub = VideoClip(
        frames=clip.frames[start:end], spacing=clip.spacing, geometry=clip.geometry
    )
    sub_gt = GroundTruth(
        left=gt.left[start:end],
        right=gt.right[start:end],
        annotated=[a - start for a in gt.annotated if start <= a < end],
        ed_frames=[e - start for e in gt.ed_frames if start <= e < end],
        es_frames=[e - start for e in gt.es_frames if start <= e < end],
        spacing=gt.spacing,
    )
    return sub, sub_gt, start


def frame_windows(frames: np.ndarray) -> torch.Tensor:
    """(T, H, W) -> (T, 3, H, W) of three-frame windows; edge frames
    duplicate their only neighbor."""
    prev = np.concatenate([frames[:1], frames[:-1]])
    nxt = np.concatenate([frames[1:], frames[-1:]])
    return torch.from_numpy(np.stack([prev, frames, nxt], axis=1).astype(np.float32))


def _in_bounds(p, grid: PatchGrid):
    return p is not None and 0.0 <= p[0] < grid.image_w and 0.0 <= p[1] < grid.image_h


def _clip_targets(gt: GroundTruth, grid: PatchGrid):
    """Stack per-landmark target planes for the annotated frames of a clip.
    A present landmark pushed outside the image by augmentation is treated
    as absent (it cannot be assigned to any patch)."""
    cls_t, reg_t, mask_t = [], [], []
    for a in gt.annotated:
        planes = [
            build_targets(p if _in_bounds(p, grid) else None, grid)
            for p in (gt.left[a], gt.right[a])
        ]
        cls_t.append(np.stack([pl.cls for pl in planes]))
        reg_t.append(np.stack([pl.reg for pl in planes]))
        mask_t.append(np.stack([pl.reg_mask for pl in planes]))
    if not cls_t:
        return None, None, None
    return (
        torch.from_numpy(np.stack(cls_t)),
        torch.from_numpy(np.stack(reg_t)),
        torch.from_numpy(np.stack(mask_t)),
    )


def _augment_fn(mode: str):
    return augment_clip if mode == "fov" else augment_clip_plain


def train(
    config: TrainConfig,
    dataset: list,
    seed: int,
    resume: Checkpoint | None = None,
    log_path=None,
    checkpoint_path=None,
) -> tuple[Checkpoint, list]:
    """Train one model; deterministic given (config, dataset, seed) when run
    with a fixed thread count. Returns the final checkpoint and the loss log
    as (step, cls, reg, temp, total, wall_ms) rows."""
    config.validate()
    torch.set_num_threads(max(1, config.threads))
    grid = PatchGrid(
        stride=config.model.stride,
        grid_h=config.model.grid_size,
        grid_w=config.model.grid_size,
    )
    weights = LossWeights(beta=config.beta)

    if resume is not None:
        net = model_from_checkpoint(resume)
        start_step = resume.step
    else:
        net = init_model(config.model, seed)
        start_step = 0
    params = dict(net.named_parameters())
    opt = OptimizerState.zeros_like(params)
    opt = replace(opt, step=start_step)
    if resume is not None and resume.extra:
        for name in params:
            mk, vk = f"adam_m.{name}", f"adam_v.{name}"
            if mk in resume.extra:
                opt.m[name] = torch.from_numpy(resume.extra[mk].copy())
                opt.v[name] = torch.from_numpy(resume.extra[vk].copy())

    rng = np.random.default_rng([seed, 0xA46])
    apex_pivot = dataset[0][0].geometry.apex if dataset else (0.0, 0.0)
    center_pivot = (config.model.input_size / 2.0, config.model.input_size / 2.0)
    pivot = apex_pivot if config.augmentation.mode == "fov" else center_pivot
    aug_fn = _augment_fn(config.augmentation.mode)

    log_rows = []
    for it in range(config.iterations):
        t0 = time.perf_counter()
        idxs = rng.integers(0, len(dataset), size=config.batch_videos)
        clips = []
        for vi in idxs:
            clip, gt = dataset[int(vi)]
            sub, sub_gt, _ = sample_clip(clip, gt, config.clip_length, rng)
            t = sample_transform(config.augmentation, rng, pivot)
            sub, sub_gt = aug_fn(sub, sub_gt, t)
            clips.append((sub, sub_gt))

        windows = torch.cat([frame_windows(c.frames) for c, _ in clips])
        preds = net(windows)
        videos = []
        offset = 0
        for sub, sub_gt in clips:
            t_len = sub.frames.shape[0]
            sl = preds_slice(preds, offset, offset + t_len)
            cls_t, reg_t, mask_t = _clip_targets(sub_gt, grid)
            videos.append(
                ClipBatch(
                    preds=sl,
                    annotated_idx=list(sub_gt.annotated),
                    cls_target=cls_t,
                    reg_target=reg_t,
                    reg_mask=mask_t,
                )
            )
            offset += t_len

        breakdown = total_loss(videos, grid, weights)
        if not torch.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss at iteration {start_step + it}")
        net.zero_grad(set_to_none=True)
        breakdown.total.backward()
        grads = {}
        for name, p in params.items():
            grads[name] = (
                p.grad if p.grad is not None else torch.zeros_like(p)
            )
        new_params, opt = adam_step(params, grads, opt, config.learning_rate)
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(new_params[name])

        step = start_step + it + 1
        c, r, tp, tot = breakdown.floats()
        log_rows.append(
            (step, c, r, tp, tot, (time.perf_counter() - t0) * 1000.0)
        )
        if (
            checkpoint_path is not None
            and config.checkpoint_interval > 0
            and step % config.checkpoint_interval == 0
        ):
            from .model import save_checkpoint

            save_checkpoint(_make_checkpoint(net, opt, step, seed), checkpoint_path)

    ckpt = _make_checkpoint(net, opt, start_step + config.iterations, seed)
    if checkpoint_path is not None:
        from .model import save_checkpoint

        save_checkpoint(ckpt, checkpoint_path)
    if log_path is not None:
        write_log(log_path, log_rows)
    return ckpt, log_rows


def _make_checkpoint(net: LandmarkNet, opt: OptimizerState, step: int, seed: int):
    extra = {}
    for name in opt.m:
        extra[f"adam_m.{name}"] = opt.m[name].detach().numpy().astype(np.float32)
        extra[f"adam_v.{name}"] = opt.v[name].detach().numpy().astype(np.float32)
    return checkpoint_from_model(
        net, step=step, rng_state=f"np-default-rng(seed={seed})", extra=extra
    )


def preds_slice(preds, start: int, end: int):
    from .model import PredictionMaps

    return PredictionMaps(
        cls_logits=preds.cls_logits[start:end],
        reg=preds.reg[start:end],
        disp_fwd=preds.disp_fwd[start:end],
        disp_bwd=preds.disp_bwd[start:end],
    )


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "cls", "reg", "temp", "total", "wall_ms"])
        for row in rows:
            w.writerow([row[0]] + [f"{x:.6f}" for x in row[1:5]] + [f"{row[5]:.1f}"])


def split_validation(dataset: list, fraction: float = 0.1) -> tuple[list, list]:
    """Hold out the last ceil(fraction * n) videos for threshold calibration."""
    n_val = max(1, int(round(fraction * len(dataset))))
    if n_val >= len(dataset):
        raise TrainConfigError("dataset too small to split a validation set")
    return dataset[:-n_val], dataset[-n_val:]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_trajectory(
    net: LandmarkNet, clip: VideoClip, gt: GroundTruth | None, tau: float,
    chunk: int = 32,
) -> Trajectory:
    grid = PatchGrid(
        stride=net.config.stride,
        grid_h=net.config.grid_size,
        grid_w=net.config.grid_size,
    )
    windows = frame_windows(clip.frames)
    left, right, lp, rp = [], [], [], []
    with torch.no_grad():
        for s in range(0, windows.shape[0], chunk):
            preds = net(windows[s : s + chunk]).detach_numpy()
            for i in range(preds.cls_logits.shape[0]):
                frame_maps = preds.index(i)
                dl = detect(frame_maps, 0, grid, tau)
                dr = detect(frame_maps, 1, grid, tau) if net.config.n_landmarks > 1 \
                    else dl
                left.append(dl.point)
                lp.append(dl.max_prob)
                right.append(dr.point)
                rp.append(dr.max_prob)
    return Trajectory(
        left=left, right=right, left_prob=lp, right_prob=rp,
        spacing=clip.spacing,
        ed_frames=list(gt.ed_frames) if gt else [],
        es_frames=list(gt.es_frames) if gt else [],
    )


def trajectory_from_gt(gt: GroundTruth) -> Trajectory:
    """Ground truth viewed as a (perfect-confidence) trajectory; used both
    for reference metric values and as an oracle short-circuit in tests."""
    present = lambda p: 1.0 if p is not None else 0.0
    return Trajectory(
        left=list(gt.left),
        right=list(gt.right),
        left_prob=[present(p) for p in gt.left],
        right_prob=[present(p) for p in gt.right],
        spacing=gt.spacing,
        ed_frames=list(gt.ed_frames),
        es_frames=list(gt.es_frames),
    )


def _mapse_pairs(gt: GroundTruth):
    """(ed, es) pairs where es is the first ES annotation after each ED."""
    pairs = []
    for ed in gt.ed_frames:
        later = [e for e in gt.es_frames if e > ed]
        if later:
            pairs.append((ed, min(later)))
    return pairs


def aggregate_report(
    pairs: list, seed: int | None = None
) -> EvalReport:
    """Aggregate per-video metrics over (predicted Trajectory, GroundTruth)
    pairs. Videos are weighted equally; a metric undefined for every video
    is reported as None."""
    if not pairs:
        raise UndefinedMetricError("no videos to evaluate")
    mae_vals, size_vals, mapse_vals, jerk_vals = [], [], [], []
    scores, labels = [], []
    per_video = []
    for vi, (traj, gt) in enumerate(pairs):
        rec = {"video": vi}
        try:
            rec["landmark_mae_mm"] = metrics_mod.landmark_mae(traj, gt)
            mae_vals.append(rec["landmark_mae_mm"])
        except UndefinedMetricError:
            rec["landmark_mae_mm"] = None

        sz = []
        for t in gt.annotated:
            if None in (traj.left[t], traj.right[t], gt.left[t], gt.right[t]):
                continue
            sz.append(
                abs(
                    metrics_mod.annulus_size(traj.left[t], traj.right[t], traj.spacing)
                    - metrics_mod.annulus_size(gt.left[t], gt.right[t], gt.spacing)
                )
            )
        rec["annulus_size_mae_mm"] = float(np.mean(sz)) if sz else None
        if sz:
            size_vals.append(rec["annulus_size_mae_mm"])

        gt_traj = trajectory_from_gt(gt)
        errs = []
        for ed, es in _mapse_pairs(gt):
            try:
                errs.append(
                    abs(metrics_mod.mapse(traj, ed, es) - metrics_mod.mapse(gt_traj, ed, es))
                )
            except UndefinedMetricError:
                continue
        rec["mapse_mae_mm"] = float(np.mean(errs)) if errs else None
        if errs:
            mapse_vals.append(rec["mapse_mae_mm"])

        try:
            rec["mean_jerk_mm_per_frame3"] = metrics_mod.mean_jerk(traj)
            jerk_vals.append(rec["mean_jerk_mm_per_frame3"])
        except UndefinedMetricError:
            rec["mean_jerk_mm_per_frame3"] = None

        for t in range(len(gt.left)):
            for prob, gt_pt in (
                (traj.left_prob[t], gt.left[t]),
                (traj.right_prob[t], gt.right[t]),
            ):
                scores.append(prob)
                labels.append(1 if gt_pt is not None else 0)
        per_video.append(rec)

    try:
        auc = metrics_mod.roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    mean_or_none = lambda vals: float(np.mean(vals)) if vals else None
    return EvalReport(
        landmark_mae_mm=mean_or_none(mae_vals),
        annulus_size_mae_mm=mean_or_none(size_vals),
        mapse_mae_mm=mean_or_none(mapse_vals),
        mean_jerk_mm_per_frame3=mean_or_none(jerk_vals),
        roc_auc=auc,
        per_video=per_video,
        seed=seed,
    )


def evaluate(
    ckpt: Checkpoint, dataset: list, tau: float, seed: int | None = None
) -> tuple[EvalReport, list]:
    """Run the model over full videos and aggregate the metric suite.
    Returns (report, trajectories)."""
    net = model_from_checkpoint(ckpt)
    net.eval()
    trajs = []
    for clip, gt in dataset:
        trajs.append(predict_trajectory(net, clip, gt, tau))
    report = aggregate_report(list(zip(trajs, (gt for _, gt in dataset))), seed=seed)
    return report, trajs


def calibrate_checkpoint(
    ckpt: Checkpoint,
    val_dataset: list,
    aug: FovAugmentConfig,
    k: int,
    seed: int,
) -> Threshold:
    """Collect (max_prob, present) pairs from ``k`` randomly FOV-augmented
    versions of each validation video and calibrate the presence threshold."""
    if k < 1:
        raise ValueError("need k >= 1 augmented versions")
    net = model_from_checkpoint(ckpt)
    net.eval()
    rng = np.random.default_rng([seed, 0xCA1])
    probs, labels = [], []
    for clip, gt in val_dataset:
        for _ in range(k):
            t = sample_transform(aug, rng, clip.geometry.apex)
            aclip, agt = augment_clip(clip, gt, t)
            traj = predict_trajectory(net, aclip, agt, tau=0.0)
            for fr in range(len(agt.left)):
                probs.extend([traj.left_prob[fr], traj.right_prob[fr]])
                labels.extend(
                    [
                        1 if agt.left[fr] is not None else 0,
                        1 if agt.right[fr] is not None else 0,
                    ]
                )
    return calibrate(probs, labels)
