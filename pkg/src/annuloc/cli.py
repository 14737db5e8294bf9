"""Command-line entry point: synth, train, calibrate, eval, infer.

Every command funnels all randomness through one --seed flag, writes a run
manifest before doing real work, and uses exit codes 0 (success),
1 (runtime failure), 2 (usage or configuration error).

Config files are flat ``key = value`` text mirroring the config dataclass
field names; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .augment import FovAugmentConfig
from .metrics import (
    Trajectory,
    append_report_csv,
    paired_ttest,
    write_report,
    write_trajectory,
)
from .model import FormatError, ModelConfig, load_checkpoint
from .synthvideo import (
    SynthConfig,
    SynthConfigError,
    generate_dataset,
    load_dataset,
    read_video,
    save_dataset,
)
from .trainer import (
    TrainConfig,
    TrainConfigError,
    aggregate_report,
    calibrate_checkpoint,
    evaluate,
    predict_trajectory,
    split_validation,
    train,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(ValueError):
    pass


def parse_kv_file(path) -> dict:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def build_synth_config(file_values: dict, overrides: dict) -> SynthConfig:
    defaults = asdict(SynthConfig())
    merged = dict(defaults)
    for k, v in file_values.items():
        if k in ("n_videos",):
            continue
        if k not in defaults:
            raise UsageError(f"unknown synth config key {k!r}")
        merged[k] = _coerce(v, defaults[k])
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v
    return SynthConfig(**merged)


_TRAIN_KEYS = {
    "iterations": int, "batch_videos": int, "clip_length": int,
    "learning_rate": float, "beta": float, "checkpoint_interval": int,
    "threads": int, "seeds": str,
    "input_size": int, "n_downsamples": int, "base_channels": int,
    "groups": int, "n_landmarks": int,
    "max_zoom": float, "max_rotation_deg": float,
    "augment_probability": float, "augment_mode": str,
}


def build_train_config(file_values: dict, overrides: dict) -> TrainConfig:
    merged: dict = {}
    for k, v in file_values.items():
        if k not in _TRAIN_KEYS:
            raise UsageError(f"unknown train config key {k!r}")
        merged[k] = _TRAIN_KEYS[k](v)
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v

    def pop(key, default):
        return merged.pop(key) if key in merged else default

    seeds = pop("seeds", "0,1,2")
    if isinstance(seeds, str):
        seeds = tuple(int(s) for s in seeds.split(",") if s.strip())
    model = ModelConfig(
        input_size=pop("input_size", 128),
        n_downsamples=pop("n_downsamples", 5),
        base_channels=pop("base_channels", 16),
        groups=pop("groups", 8),
        n_landmarks=pop("n_landmarks", 2),
    )
    aug = FovAugmentConfig(
        max_zoom=pop("max_zoom", 1.5),
        max_rotation=np.deg2rad(pop("max_rotation_deg", 15.0)),
        probability=pop("augment_probability", 0.5),
        mode=pop("augment_mode", "fov"),
    )
    cfg = TrainConfig(seeds=seeds, model=model, augmentation=aug, **merged)
    cfg.validate()
    return cfg


def write_manifest(out_dir: Path, command: str, config: dict, seed, artifacts) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(
            {
                "command": command,
                "config": config,
                "seed": seed,
                "artifacts": [str(a) for a in artifacts],
                "tool_version": __version__,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            },
            f,
            indent=1,
        )
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    file_values = parse_kv_file(args.config) if args.config else {}
    n_videos = args.n_videos
    if n_videos is None and "n_videos" in file_values:
        n_videos = int(file_values["n_videos"])
    if n_videos is None:
        n_videos = 10
    cfg = build_synth_config(file_values, {"seed": args.seed})
    cfg.validate()
    out = Path(args.out)
    planned = [out / f"video{i:03d}.avf" for i in range(n_videos)]
    write_manifest(out, "synth", {**cfg.to_dict(), "n_videos": n_videos},
                   cfg.seed, planned)
    dataset = generate_dataset(cfg, n_videos)
    save_dataset(out, dataset)
    print(f"wrote {n_videos} videos to {out}")
    return 0


def cmd_train(args) -> int:
    file_values = parse_kv_file(args.config) if args.config else {}
    overrides = {
        "iterations": args.iterations,
        "beta": args.beta,
        "threads": args.threads,
        "seeds": args.seeds,
    }
    cfg = build_train_config(file_values, overrides)
    dataset = load_dataset(args.data)
    if args.val:
        train_set, val_set = dataset, load_dataset(args.val)
    else:
        train_set, val_set = split_validation(dataset)

    out = Path(args.out)
    ckpt_paths = [out / f"seed{s}.ckpt" for s in cfg.seeds]
    write_manifest(
        out, "train",
        {**_train_config_dict(cfg), "data": str(args.data), "val": args.val,
         "resume": args.resume, "baseline": cfg.beta == 0.0},
        list(cfg.seeds), ckpt_paths,
    )

    resume = load_checkpoint(args.resume, expect_config=cfg.model) if args.resume else None
    summary = []
    for s, ckpt_path in zip(cfg.seeds, ckpt_paths):
        ckpt, log = train(
            cfg, train_set, seed=s, resume=resume,
            log_path=out / f"seed{s}_log.csv", checkpoint_path=ckpt_path,
        )
        tail = [row[4] for row in log[-100:]]
        report, _ = evaluate(ckpt, val_set, tau=0.0, seed=s)
        summary.append(
            {
                "seed": s,
                "step": ckpt.step,
                "final_loss_mean": float(np.mean(tail)) if tail else None,
                "val": report.csv_row(),
            }
        )
        print(f"seed {s}: step {ckpt.step}, checkpoint {ckpt_path}")
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return 0


def cmd_calibrate(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1 (augmented negatives are required)")
    ckpt = load_checkpoint(args.checkpoint)
    val = load_dataset(args.validation)
    aug = FovAugmentConfig(
        max_zoom=args.max_zoom, max_rotation=np.deg2rad(args.max_rotation_deg),
        probability=1.0,
    )
    out = Path(args.out)
    write_manifest(out.parent if out.suffix else out, "calibrate",
                   {"checkpoint": args.checkpoint, "k": args.k},
                   args.seed, [out])
    th = calibrate_checkpoint(ckpt, val, aug, k=args.k, seed=args.seed)
    with open(out, "w") as f:
        json.dump({"tau": th.tau, "accuracy": th.accuracy}, f, indent=1)
        f.write("\n")
    print(f"tau = {th.tau:.4f} (validation accuracy {th.accuracy:.4f})")
    return 0


def _eval_one(ckpt_path, dataset, tau, out: Path, tag: str, seed):
    ckpt = load_checkpoint(ckpt_path)
    report, trajs = evaluate(ckpt, dataset, tau=tau, seed=seed)
    for i, traj in enumerate(trajs):
        write_trajectory(out / f"{tag}traj{i:03d}.json", traj)
        _write_curves(out / f"{tag}curves{i:03d}.csv", traj)
    write_report(out / f"{tag}report.json", report)
    append_report_csv(out / "reports.csv", report)
    return report


def _write_curves(path, traj: Trajectory) -> None:
    """Per-frame axial positions and annulus excursion, for re-plotting."""
    base = None
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "left_y", "right_y", "excursion_mm"])
        for t in range(len(traj)):
            ly = traj.left[t][1] if traj.left[t] else None
            ry = traj.right[t][1] if traj.right[t] else None
            exc = None
            if ly is not None and ry is not None:
                mid = (ly + ry) / 2.0
                if base is None:
                    base = mid
                exc = (base - mid) * traj.spacing
            fmt = lambda v: "" if v is None else f"{v:.4f}"
            w.writerow([t, fmt(ly), fmt(ry), fmt(exc)])


def cmd_eval(args) -> int:
    if not args.compare and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --compare")
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "eval",
                   {"checkpoint": args.checkpoint, "data": str(args.data),
                    "tau": args.tau, "compare": args.compare},
                   args.seed, [out / "report.json"])
    if args.compare:
        rep_a = _eval_one(args.compare[0], dataset, args.tau, out, "a_", args.seed)
        rep_b = _eval_one(args.compare[1], dataset, args.tau, out, "b_", args.seed)
        table, pvalues = _paired_compare(rep_a, rep_b)
        with open(out / "compare.json", "w") as f:
            json.dump({"per_video": table, "p_values": pvalues}, f, indent=1)
            f.write("\n")
        print(json.dumps(pvalues, indent=1))
        return 0
    report = _eval_one(args.checkpoint, dataset, args.tau, out, "", args.seed)
    print(json.dumps(report.csv_row(), indent=1))
    return 0


_COMPARE_METRICS = (
    "landmark_mae_mm", "annulus_size_mae_mm", "mapse_mae_mm",
    "mean_jerk_mm_per_frame3",
)


def _paired_compare(rep_a, rep_b):
    table = []
    for ra, rb in zip(rep_a.per_video, rep_b.per_video):
        row = {"video": ra["video"]}
        for m in _COMPARE_METRICS:
            row[f"a_{m}"] = ra[m]
            row[f"b_{m}"] = rb[m]
        table.append(row)
    pvalues = {}
    for m in _COMPARE_METRICS:
        a = [r[f"a_{m}"] for r in table]
        b = [r[f"b_{m}"] for r in table]
        keep = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
        if len(keep) >= 2:
            _, p = paired_ttest([x for x, _ in keep], [y for _, y in keep])
            pvalues[m] = p
        else:
            pvalues[m] = None
    return table, pvalues


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    from .model import model_from_checkpoint

    net = model_from_checkpoint(ckpt)
    net.eval()
    clip = read_video(args.video)
    traj = predict_trajectory(net, clip, None, tau=args.tau)
    out = Path(args.out)
    write_manifest(out.parent, "infer",
                   {"checkpoint": args.checkpoint, "video": str(args.video),
                    "tau": args.tau}, None, [out])
    write_trajectory(out, traj)
    print(f"wrote trajectory to {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="annuloc",
        description="Temporally consistent landmark localization toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", help="synth config file (key = value)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-videos", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train one model per seed")
    tp.add_argument("--config", help="train config file (key = value)")
    tp.add_argument("--data", required=True)
    tp.add_argument("--val", default=None)
    tp.add_argument("--out", required=True)
    tp.add_argument("--seeds", default=None, help="comma-separated list")
    tp.add_argument("--beta", type=float, default=None)
    tp.add_argument("--iterations", type=int, default=None)
    tp.add_argument("--threads", type=int, default=None)
    tp.add_argument("--resume", default=None)
    tp.set_defaults(func=cmd_train)

    cp = sub.add_parser("calibrate", help="calibrate the presence threshold")
    cp.add_argument("--checkpoint", required=True)
    cp.add_argument("--validation", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--k", type=int, default=4)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--max-zoom", type=float, default=1.5)
    cp.add_argument("--max-rotation-deg", type=float, default=15.0)
    cp.set_defaults(func=cmd_calibrate)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ep.add_argument("--checkpoint", default=None)
    ep.add_argument("--data", required=True)
    ep.add_argument("--tau", type=float, default=0.5)
    ep.add_argument("--out", required=True)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--compare", nargs=2, metavar=("BASELINE", "PROPOSED"),
                    default=None)
    ep.set_defaults(func=cmd_eval)

    ip = sub.add_parser("infer", help="run inference on a single video")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--video", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--tau", type=float, default=0.5)
    ip.set_defaults(func=cmd_infer)
    return p


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["augmentation"] = asdict(cfg.augmentation)
    d["model"] = asdict(cfg.model)
    d["seeds"] = list(cfg.seeds)
    return d


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SynthConfigError, TrainConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (FormatError, FileNotFoundError, OSError, ValueError,
            ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
