"""Fully convolutional landmark network and checkpoint serialization.

The network takes three consecutive grayscale frames stacked in the channel
dimension and produces, on a 2^n_downsamples-times downsampled grid:

* per-landmark classification logits (does this patch contain the landmark),
* per-landmark signed-log regression of the landmark offset from each patch
  center (the current-frame location map),
* per-landmark forward/backward displacement maps in pixels (motion of the
  landmark toward the next/previous frame).

The trunk is a small residual net with GroupNorm; heads are stacks of three
1x1 convolutions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ModelConfigError",
    "FormatError",
    "ModelConfig",
    "PredictionMaps",
    "Checkpoint",
    "LandmarkNet",
    "init_model",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_model",
    "model_from_checkpoint",
]

CHECKPOINT_MAGIC = b"ALCK"
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Invalid model configuration."""


class FormatError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    n_downsamples: int = 5
    base_channels: int = 16
    groups: int = 8
    n_landmarks: int = 2

    def __post_init__(self) -> None:
        if self.input_size <= 0 or self.input_size % (2**self.n_downsamples) != 0:
            raise ModelConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.n_downsamples}"
            )
        if self.base_channels % self.groups != 0:
            raise ModelConfigError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}"
            )
        if self.n_landmarks < 1:
            raise ModelConfigError("n_landmarks must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.input_size // (2**self.n_downsamples)

    @property
    def stride(self) -> int:
        return 2**self.n_downsamples

    def widths(self) -> list[int]:
        """Trunk channel width per downsampling stage."""
        return [
            self.base_channels * min(2 ** (i // 2), 4)
            for i in range(self.n_downsamples)
        ]

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in d.items()})


@dataclass
class PredictionMaps:
    """Batched prediction maps on the g x g output grid.

    cls_logits: (B, L, g, g); reg / disp_fwd / disp_bwd: (B, L, 2, g, g).
    reg is in signed-log units, the displacement maps in pixels.
    """

    cls_logits: torch.Tensor
    reg: torch.Tensor
    disp_fwd: torch.Tensor
    disp_bwd: torch.Tensor

    def index(self, i: int) -> "PredictionMaps":
        return PredictionMaps(
            cls_logits=self.cls_logits[i],
            reg=self.reg[i],
            disp_fwd=self.disp_fwd[i],
            disp_bwd=self.disp_bwd[i],
        )

    def detach_numpy(self) -> "PredictionMaps":
        return PredictionMaps(
            *(t.detach().cpu().numpy() for t in
              (self.cls_logits, self.reg, self.disp_fwd, self.disp_bwd))
        )


class _DownBlock(nn.Module):
    """Stride-2 residual block: conv-GN-ReLU-conv-GN plus a 1x1 stride-2
    projection shortcut."""

    def __init__(self, c_in: int, c_out: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.gn1 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1)
        self.gn2 = nn.GroupNorm(groups, c_out)
        self.proj = nn.Conv2d(c_in, c_out, 1, stride=2)

    def forward(self, x):
        y = F.relu(self.gn1(self.conv1(x)))
        y = self.gn2(self.conv2(y))
        return F.relu(y + self.proj(x))


def _head(c_in: int, c_out: int) -> nn.Sequential:
    """Three 1x1 convolutions, linear final layer."""
    return nn.Sequential(
        nn.Conv2d(c_in, c_in, 1), nn.ReLU(),
        nn.Conv2d(c_in, c_in, 1), nn.ReLU(),
        nn.Conv2d(c_in, c_out, 1),
    )


class LandmarkNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        # The stem performs the first of the n_downsamples stride-2 stages.
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1),
            nn.GroupNorm(config.groups, widths[0]),
            nn.ReLU(),
        )
        blocks = []
        for i in range(1, config.n_downsamples):
            blocks.append(_DownBlock(widths[i - 1], widths[i], config.groups))
        self.blocks = nn.Sequential(*blocks)
        c = widths[-1]
        self.cls_head = _head(c, config.n_landmarks)
        self.reg_head = _head(c, 6 * config.n_landmarks)

    def forward(self, x: torch.Tensor) -> PredictionMaps:
        """x: (B, 3, H, W) with H = W = config.input_size."""
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3] \
                or x.shape[2] != self.config.input_size:
            raise ValueError(
                f"expected (B, 3, {self.config.input_size}, "
                f"{self.config.input_size}) input, got {tuple(x.shape)}"
            )
        feats = self.blocks(self.stem(x))
        cls_logits = self.cls_head(feats)
        reg_out = self.reg_head(feats)
        b, _, g, _ = cls_logits.shape
        n = self.config.n_landmarks
        reg_out = reg_out.view(b, n, 6, g, g)
        return PredictionMaps(
            cls_logits=cls_logits,
            reg=reg_out[:, :, 0:2],
            disp_fwd=reg_out[:, :, 2:4],
            disp_bwd=reg_out[:, :, 4:6],
        )


def init_model(config: ModelConfig, seed: int) -> LandmarkNet:
    """Build a LandmarkNet with Kaiming fan-in normal weights and zero
    biases, deterministic given the seed."""
    net = LandmarkNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=gen) * std
                )
                m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


# ---------------------------------------------------------------------------
# Checkpoint format: magic "ALCK", u32 version, u32 header length, JSON
# header {config, step, rng_state, tensors: [{name, shape, offset}]}, then
# raw little-endian f32 tensor data.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: str = ""
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = []
    offset = 0
    blobs = []
    for group, d in (("params", ckpt.params), ("extra", ckpt.extra)):
        for name in sorted(d):
            arr = np.ascontiguousarray(d[name], dtype="<f4")
            tensors.append(
                {"group": group, "name": name,
                 "shape": list(arr.shape), "offset": offset}
            )
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "step": ckpt.step,
            "rng_state": ckpt.rng_state,
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            head = f.read(8)
            if len(head) != 8:
                raise FormatError(f"{path}: truncated header")
            version, hlen = struct.unpack("<II", head)
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            raw = f.read(hlen)
            if len(raw) != hlen:
                raise FormatError(f"{path}: truncated header")
            header = json.loads(raw)
            data = f.read()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e

    config = ModelConfig.from_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise FormatError(
            f"{path}: checkpoint config {config} does not match expected "
            f"{expect_config}"
        )
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "extra": {}}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        chunk = data[start : start + 4 * n]
        if len(chunk) != 4 * n:
            raise FormatError(f"{path}: truncated tensor {spec['name']}")
        groups[spec["group"]][spec["name"]] = np.frombuffer(
            chunk, dtype="<f4"
        ).reshape(shape).copy()
    return Checkpoint(
        config=config,
        params=groups["params"],
        step=int(header["step"]),
        rng_state=header["rng_state"],
        extra=groups["extra"],
    )


def checkpoint_from_model(
    net: LandmarkNet, step: int = 0, rng_state: str = "",
    extra: dict[str, np.ndarray] | None = None,
) -> Checkpoint:
    params = {
        k: v.detach().cpu().numpy().astype(np.float32)
        for k, v in net.state_dict().items()
    }
    return Checkpoint(
        config=net.config, params=params, step=step,
        rng_state=rng_state, extra=extra or {},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> LandmarkNet:
    net = LandmarkNet(ckpt.config)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()}
    net.load_state_dict(state)
    return net
