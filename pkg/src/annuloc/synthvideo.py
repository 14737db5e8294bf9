"""Synthetic sector-video generator with two annulus-like landmarks.

Videos show a bright ridge (the "annulus plane") whose endpoints perform a
cardiac-like periodic excursion toward the sector apex, under multiplicative
temporally correlated speckle. Annotations (sparse landmark positions, ED/ES
frame indices) are produced alongside, so the generator stands in for a
clinical dataset at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import SectorGeometry, contains, sector_mask

__all__ = [
    "SynthConfigError",
    "SynthConfig",
    "VideoClip",
    "GroundTruth",
    "default_geometry",
    "systolic_waveform",
    "landmark_trajectory",
    "render_frame",
    "generate_video",
    "generate_dataset",
    "write_video",
    "read_video",
    "write_annotations",
    "read_annotations",
]

VIDEO_MAGIC = b"AVF1"

#: Fraction of the cycle spent in systole (ED -> ES).
SYSTOLE_FRACTION = 1.0 / 3.0


class SynthConfigError(ValueError):
    """Invalid synthetic-dataset configuration."""


@dataclass(frozen=True)
class SynthConfig:
    t_frames: int = 60
    height: int = 128
    width: int = 128
    cycles: int = 2
    amplitude_mm: float = 12.0
    annulus_width_mm: float = 4.0
    spacing: float = 1.0  # mm per px
    speckle_strength: float = 0.35
    speckle_smooth_px: float = 2.5
    speckle_time_corr: float = 0.85
    annotation_density: float = 0.15
    exit_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.t_frames < 3 or self.height <= 0 or self.width <= 0:
            raise SynthConfigError("t_frames must be >= 3 and dims positive")
        if self.cycles < 1 or self.t_frames % self.cycles != 0:
            raise SynthConfigError("t_frames must be a positive multiple of cycles")
        if self.amplitude_mm <= 0:
            raise SynthConfigError("amplitude_mm must be positive")
        if not 0.0 < self.annotation_density <= 1.0:
            raise SynthConfigError("annotation_density must be in (0, 1]")
        if not 0.0 <= self.exit_fraction <= 1.0:
            raise SynthConfigError("exit_fraction must be in [0, 1]")
        if self.spacing <= 0:
            raise SynthConfigError("spacing must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        return SynthConfig(**d)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    spacing: float
    geometry: SectorGeometry


@dataclass
class GroundTruth:
    left: list  # per frame: (x, y) tuple or None
    right: list
    annotated: list  # sorted frame indices
    ed_frames: list
    es_frames: list
    spacing: float


def default_geometry(cfg: SynthConfig) -> SectorGeometry:
    apex = (cfg.width / 2.0, 4.0)
    return SectorGeometry(
        apex=apex,
        half_angle=np.deg2rad(37.5),
        r_min=0.08 * cfg.height,
        r_max=cfg.height - 8.0 - apex[1],
        height=cfg.height,
        width=cfg.width,
    )


def _smoothstep5(t: np.ndarray) -> np.ndarray:
    """Quintic smoothstep: zero first and second derivatives at 0 and 1."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def systolic_waveform(phase, systole_fraction: float = SYSTOLE_FRACTION):
    """Excursion waveform w(phase) with w(0)=0 (ED) and w(systole_fraction)=1
    (ES), built from quintic smoothsteps so it is C^2 and periodic."""
    phase = np.mod(np.asarray(phase, dtype=float), 1.0)
    s = systole_fraction
    up = _smoothstep5(phase / s)
    down = 1.0 - _smoothstep5((phase - s) / (1.0 - s))
    out = np.where(phase <= s, up, down)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class _MotionParams:
    """Per-video trajectory shape; jitter keeps videos distinct while the
    excursion amplitude stays at the configured value."""

    base_radius_frac: float = 0.72
    base_angle_frac: float = 0.62  # fraction of half_angle off-axis
    wobble_frac: float = 0.05  # lateral wobble amplitude as fraction of A
    exit_mode: bool = False
    exit_push_frac: float = 0.22


def landmark_trajectory(
    cfg: SynthConfig, phase, motion: _MotionParams | None = None
):
    """Left/right landmark positions (px) at a cycle phase in [0, 1)."""
    motion = motion or _MotionParams()
    geom = default_geometry(cfg)
    a_px = cfg.amplitude_mm / cfg.spacing
    axis = np.array([np.cos(geom.axis_angle), np.sin(geom.axis_angle)])
    perp = np.array([-axis[1], axis[0]])
    apex = np.asarray(geom.apex)

    r0 = geom.r_min + motion.base_radius_frac * (geom.r_max - geom.r_min)
    theta = motion.base_angle_frac * geom.half_angle
    left0 = apex + r0 * np.array(
        [np.cos(geom.axis_angle + theta), np.sin(geom.axis_angle + theta)]
    )
    right0 = apex + r0 * np.array(
        [np.cos(geom.axis_angle - theta), np.sin(geom.axis_angle - theta)]
    )

    w = systolic_waveform(phase)
    wob = motion.wobble_frac * a_px * np.sin(2.0 * np.pi * np.asarray(phase))
    axial = -a_px * w  # toward the apex during systole
    left = left0 + np.multiply.outer(axial, axis) - np.multiply.outer(wob, perp)
    right = right0 + np.multiply.outer(axial, axis) + np.multiply.outer(wob, perp)
    if motion.exit_mode:
        # Push the right landmark laterally away from the axis so it crosses
        # the sector edge around peak systole.
        outward = perp if (right0 - apex) @ perp > 0 else -perp
        gap = (geom.half_angle - theta) * r0  # arc distance to the edge
        push = np.asarray(w) * (gap + motion.exit_push_frac * r0)
        right = right + np.multiply.outer(push, outward)
    return left, right


def _segment_distance(xs, ys, p0, p1):
    """Distance from each pixel to the segment p0-p1."""
    d = p1 - p0
    denom = float(d @ d)
    if denom < 1e-12:
        return np.hypot(xs - p0[0], ys - p0[1])
    t = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))


def _smooth_noise(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = rng.standard_normal((cfg.height, cfg.width))
    n = gaussian_filter(n, cfg.speckle_smooth_px)
    std = n.std()
    return n / std if std > 0 else n


def _render(cfg: SynthConfig, left, right, noise: np.ndarray | None) -> np.ndarray:
    geom = default_geometry(cfg)
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width]
    xs = xs + 0.5
    ys = ys + 0.5
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    sigma_w = max(cfg.annulus_width_mm / cfg.spacing / 2.355, 0.8)  # FWHM -> sigma
    ridge = np.exp(-0.5 * (_segment_distance(xs, ys, left, right) / sigma_w) ** 2)
    sigma_b = 1.3 * sigma_w
    blobs = np.exp(
        -0.5 * ((xs - left[0]) ** 2 + (ys - left[1]) ** 2) / sigma_b**2
    ) + np.exp(-0.5 * ((xs - right[0]) ** 2 + (ys - right[1]) ** 2) / sigma_b**2)
    img = 0.15 + 0.35 * ridge + 0.5 * blobs
    if noise is not None and cfg.speckle_strength > 0:
        img = img * (1.0 + cfg.speckle_strength * noise)
    img = np.clip(img, 0.0, 1.0)
    img *= sector_mask(geom)
    return img.astype(np.float32)


def render_frame(cfg: SynthConfig, left, right, rng: np.random.Generator) -> np.ndarray:
    """Render one frame; speckle drawn fresh from ``rng`` (use
    :func:`generate_video` for temporally correlated speckle)."""
    noise = _smooth_noise(cfg, rng) if cfg.speckle_strength > 0 else None
    return _render(cfg, left, right, noise)


def _frame_phases(cfg: SynthConfig) -> np.ndarray:
    t_cycle = cfg.t_frames // cfg.cycles
    return (np.arange(cfg.t_frames) % t_cycle) / t_cycle


def _ed_es_frames(cfg: SynthConfig) -> tuple[list, list]:
    t_cycle = cfg.t_frames // cfg.cycles
    phases = (np.arange(t_cycle)) / t_cycle
    w = systolic_waveform(phases)
    ed_off = int(np.argmin(w))
    es_off = int(np.argmax(w))
    eds = [ed_off + c * t_cycle for c in range(cfg.cycles)]
    ess = [es_off + c * t_cycle for c in range(cfg.cycles)]
    return eds, ess


def generate_video(
    cfg: SynthConfig, rng: np.random.Generator, exit_mode: bool = False
) -> tuple[VideoClip, GroundTruth]:
    """Generate one video with its ground truth from an explicit rng."""
    geom = default_geometry(cfg)
    motion = _MotionParams(
        base_radius_frac=0.72 + rng.uniform(-0.06, 0.06),
        base_angle_frac=0.62 + rng.uniform(-0.08, 0.08),
        wobble_frac=rng.uniform(0.03, 0.07),
        exit_mode=exit_mode,
    )
    phases = _frame_phases(cfg)
    left_pts, right_pts = landmark_trajectory(cfg, phases, motion)

    frames = np.empty((cfg.t_frames, cfg.height, cfg.width), dtype=np.float32)
    noise = None
    rho = cfg.speckle_time_corr
    for t in range(cfg.t_frames):
        if cfg.speckle_strength > 0:
            fresh = _smooth_noise(cfg, rng)
            if noise is None:
                noise = fresh
            else:
                noise = rho * noise + np.sqrt(1.0 - rho * rho) * fresh
        frames[t] = _render(cfg, left_pts[t], right_pts[t], noise)

    left, right = [], []
    for t in range(cfg.t_frames):
        lp, rp = left_pts[t], right_pts[t]
        left.append(tuple(lp) if contains(geom, lp) else None)
        right.append(tuple(rp) if contains(geom, rp) else None)

    eds, ess = _ed_es_frames(cfg)
    annotated = set(eds) | set(ess)
    for t in range(cfg.t_frames):
        if t not in annotated and rng.uniform() < cfg.annotation_density:
            annotated.add(t)
    if cfg.annotation_density >= 1.0:
        annotated = set(range(cfg.t_frames))

    clip = VideoClip(frames=frames, spacing=cfg.spacing, geometry=geom)
    gt = GroundTruth(
        left=left,
        right=right,
        annotated=sorted(annotated),
        ed_frames=eds,
        es_frames=ess,
        spacing=cfg.spacing,
    )
    return clip, gt


def generate_dataset(
    cfg: SynthConfig, n_videos: int, seed: int | None = None
) -> list[tuple[VideoClip, GroundTruth]]:
    """Deterministically generate ``n_videos`` videos. Each video's rng
    stream derives from (seed, index), so parallel and serial generation
    agree."""
    cfg.validate()
    if n_videos < 1:
        raise SynthConfigError("n_videos must be >= 1")
    seed = cfg.seed if seed is None else seed
    n_exit = int(round(cfg.exit_fraction * n_videos))
    out = []
    for v in range(n_videos):
        rng = np.random.default_rng(np.random.SeedSequence((seed, v)))
        out.append(generate_video(cfg, rng, exit_mode=v < n_exit))
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_video(path, clip: VideoClip) -> None:
    """Binary video format: magic, u32 T/H/W, f32 spacing, f32 frame data,
    all little-endian row-major."""
    t, h, w = clip.frames.shape
    with open(path, "wb") as f:
        f.write(VIDEO_MAGIC)
        f.write(struct.pack("<IIIf", t, h, w, clip.spacing))
        f.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def read_video(path, geometry: SectorGeometry | None = None) -> VideoClip:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VIDEO_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        t, h, w, spacing = struct.unpack("<IIIf", f.read(16))
        data = np.frombuffer(f.read(t * h * w * 4), dtype="<f4")
        if data.size != t * h * w:
            raise ValueError(f"{path}: truncated video data")
        frames = data.reshape(t, h, w).copy()
    return VideoClip(frames=frames, spacing=spacing, geometry=geometry)


def _point_to_json(p):
    return None if p is None else {"x": float(p[0]), "y": float(p[1])}


def _point_from_json(d):
    return None if d is None else (float(d["x"]), float(d["y"]))


def write_annotations(path, gt: GroundTruth, geometry: SectorGeometry) -> None:
    doc = {
        "spacing": gt.spacing,
        "geometry": geometry.to_dict(),
        "ed": list(gt.ed_frames),
        "es": list(gt.es_frames),
        "frames": [
            {
                "index": t,
                "left": _point_to_json(gt.left[t]),
                "right": _point_to_json(gt.right[t]),
                "annotated": t in set(gt.annotated),
            }
            for t in range(len(gt.left))
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_annotations(path) -> tuple[GroundTruth, SectorGeometry]:
    with open(path) as f:
        doc = json.load(f)
    frames = sorted(doc["frames"], key=lambda fr: fr["index"])
    gt = GroundTruth(
        left=[_point_from_json(fr["left"]) for fr in frames],
        right=[_point_from_json(fr["right"]) for fr in frames],
        annotated=[fr["index"] for fr in frames if fr["annotated"]],
        ed_frames=list(doc["ed"]),
        es_frames=list(doc["es"]),
        spacing=float(doc["spacing"]),
    )
    return gt, SectorGeometry.from_dict(doc["geometry"])


def save_dataset(out_dir, dataset) -> list[tuple[Path, Path]]:
    """Write each (clip, gt) pair as videoNNN.avf + videoNNN.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (clip, gt) in enumerate(dataset):
        vp = out_dir / f"video{i:03d}.avf"
        ap = out_dir / f"video{i:03d}.json"
        write_video(vp, clip)
        write_annotations(ap, gt, clip.geometry)
        paths.append((vp, ap))
    return paths


def load_dataset(data_dir) -> list[tuple[VideoClip, GroundTruth]]:
    data_dir = Path(data_dir)
    out = []
    for vp in sorted(data_dir.glob("video*.avf")):
        ap = vp.with_suffix(".json")
        gt, geom = read_annotations(ap)
        clip = read_video(vp, geometry=geom)
        out.append((clip, gt))
    if not out:
        raise FileNotFoundError(f"no video*.avf files in {data_dir}")
    return out
