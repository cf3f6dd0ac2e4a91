"""RGB encoder: block CNN with per-sequence temporal shifts over packed batches.

Frames of all clips in a batch are stacked along one axis (no padding).
Before each residual block, a fraction of channels is shifted one step
forward and backward in time inside each clip. A per-clip shift counter
stops shifting once a clip has been shifted as many times as it has
frames. After the backbone, each clip's frame features are aggregated
with a temporal 1D convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import FeatureSequence, PackedFrameBatch
from .errors import ConfigError, DataError
from .numerics import FrameNorm, conv_output_size

SHIFT_TYPES = ("tsam", "tsm", "none")
REDUCTIONS = ("avgpool", "flatten")


@dataclass(frozen=True)
class TsamConfig:
    channels: tuple = (16, 32, 32, 64)  # one entry per shift-bearing block
    strides: tuple = (1, 2, 1, 2)
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    shift_fraction: float = 0.125
    count_shift: bool = True
    shift_type: str = "tsam"
    reduction: str = "avgpool"
    feature_dim: int = 192
    temporal_kernel: int = 3
    input_size: int = 32
    in_channels: int = 3
    norm_groups: int = 4

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ConfigError("tsam needs at least one block")
        if len(self.strides) != len(self.channels):
            raise ConfigError("tsam.strides and tsam.channels must have the same length")
        if self.shift_type not in SHIFT_TYPES:
            raise ConfigError(f"tsam.shift_type must be one of {SHIFT_TYPES}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"tsam.reduction must be one of {REDUCTIONS}")
        if not 0 <= self.shift_fraction <= 0.5:
            raise ConfigError("tsam.shift_fraction must lie in [0, 0.5]")
        for c in self.block_inputs:
            fold = self.shift_fraction * c
            if abs(fold - round(fold)) > 1e-9:
                raise ConfigError(f"shift fraction {self.shift_fraction} of {c} channels is not integral")
        if self.temporal_kernel % 2 != 1:
            raise ConfigError("tsam.temporal_kernel must be odd")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    @property
    def block_inputs(self) -> tuple:
        return (self.stem_channels,) + tuple(self.channels[:-1])

    def spatial_size(self) -> int:
        size = conv_output_size(self.input_size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.stem_pool:
            size = conv_output_size(size, 3, 2, 1)
        for s in self.strides:
            size = conv_output_size(size, 3, s, 1)
        return size

    @classmethod
    def tiny(cls, **overrides) -> "TsamConfig":
        return replace(cls(), **overrides)

    @classmethod
    def resnet34(cls, **overrides) -> "TsamConfig":
        stages = ((64, 3), (128, 4), (256, 6), (512, 3))
        channels, strides = [], []
        for i, (c, n) in enumerate(stages):
            for j in range(n):
                channels.append(c)
                strides.append(2 if (j == 0 and i > 0) else 1)
        base = dict(channels=tuple(channels), strides=tuple(strides), stem_channels=64,
                     stem_kernel=7, stem_stride=2, stem_pool=True, feature_dim=512,
                     input_size=224, norm_groups=32)
        base.update(overrides)
        return cls(**base)


def temporal_shift(seq: torch.Tensor, fraction: float) -> torch.Tensor:
    """Shift channels of one clip (T, C, H, W) along time.

    The first ``fraction * C`` channels move forward (frame t gets frame
    t - 1, frame 0 gets zeros), the next ``fraction * C`` move backward
    (frame t gets t + 1, the last frame gets zeros).
    """
    fold = int(fraction * seq.shape[1])
    if fold == 0:
        return seq
    zero = seq.new_zeros((1, fold) + seq.shape[2:])
    fwd = torch.cat([zero, seq[:-1, :fold]], dim=0)
    bwd = torch.cat([seq[1:, fold:2 * fold], zero], dim=0)
    return torch.cat([fwd, bwd, seq[:, 2 * fold:]], dim=1)


def packed_temporal_shift(x: torch.Tensor, lengths, active, fold: int) -> torch.Tensor:
    """``temporal_shift`` applied inside every clip of a packed batch.

    Clips whose ``active`` flag is False pass through unchanged. Values
    never cross clip boundaries: boundary frames receive exact zeros.
    """
    if fold == 0 or not any(active):
        return x
    lengths_t = torch.as_tensor(lengths)
    ends = torch.cumsum(lengths_t, 0)
    starts = ends - lengths_t
    bs = x.shape[0]
    first = torch.zeros(bs, dtype=torch.bool)
    last = torch.zeros(bs, dtype=torch.bool)
    first[starts] = True
    last[ends - 1] = True
    on = torch.repeat_interleave(torch.as_tensor(active, dtype=torch.bool), lengths_t)
    view = (-1, 1, 1, 1)

    zero = x.new_zeros((1, fold) + x.shape[2:])
    fwd = torch.cat([zero, x[:-1, :fold]], dim=0)
    fwd = torch.where(first.view(view), torch.zeros_like(fwd), fwd)
    bwd = torch.cat([x[1:, fold:2 * fold], zero], dim=0)
    bwd = torch.where(last.view(view), torch.zeros_like(bwd), bwd)
    shifted = torch.cat([fwd, bwd, x[:, 2 * fold:]], dim=1)
    return torch.where(on.view(view), shifted, x)


def tsm_shift(x: torch.Tensor, fold: int) -> torch.Tensor:
    """Classic fixed-length shift on (n, T, C, H, W)."""
    out = torch.zeros_like(x)
    out[:, 1:, :fold] = x[:, :-1, :fold]
    out[:, :-1, fold:2 * fold] = x[:, 1:, fold:2 * fold]
    out[:, :, 2 * fold:] = x[:, :, 2 * fold:]
    return out


class ShiftBlock(nn.Module):
    """Residual block; the temporal shift acts on the residual branch input."""

    def __init__(self, c_in: int, c_out: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = FrameNorm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = FrameNorm(c_out, groups)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), FrameNorm(c_out, groups))

    def forward(self, x, shifted, record=None):
        h = F.relu(self.norm1(self.conv1(shifted)))
        h = self.norm2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(h + skip)
        if record is not None:
            record.extend([shifted.numel(), h.numel(), out.numel()])
        return out


class TsamEncoder(nn.Module):
    def __init__(self, cfg: TsamConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        stem = [nn.Conv2d(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride,
                          cfg.stem_kernel // 2, bias=False),
                FrameNorm(cfg.stem_channels, g), nn.ReLU()]
        if cfg.stem_pool:
            stem.append(nn.MaxPool2d(3, 2, 1))
        self.stem = nn.Sequential(*stem)
        self.blocks = nn.ModuleList(
            ShiftBlock(c_in, c_out, s, g)
            for c_in, c_out, s in zip(cfg.block_inputs, cfg.channels, cfg.strides))
        if cfg.reduction == "avgpool":
            agg_in = cfg.channels[-1]
        else:
            agg_in = cfg.channels[-1] * cfg.spatial_size() ** 2
        self.aggregate = nn.Conv1d(agg_in, cfg.feature_dim, cfg.temporal_kernel,
                                   padding=cfg.temporal_kernel // 2)
        self.folds = [int(cfg.shift_fraction * c) for c in cfg.block_inputs]
        # instrumentation from the most recent forward pass
        self.shift_counts: list[int] = []
        self.activation_sizes: list[int] = []

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def backbone(self, batch: PackedFrameBatch) -> torch.Tensor:
        """Per-frame backbone features, (Σ L_i, C, H', W')."""
        lengths = list(batch.lengths)
        record = self.activation_sizes = []
        if self.cfg.shift_type == "tsm":
            return self._padded_backbone(batch.frames, lengths, record)
        x = self.stem(batch.frames)
        record.append(x.numel())
        counters = [0] * len(lengths)
        for b, block in enumerate(self.blocks):
            if self.cfg.shift_type == "none":
                active = [False] * len(lengths)
            elif self.cfg.count_shift:
                active = [c < l for c, l in zip(counters, lengths)]
            else:
                active = [True] * len(lengths)
            counters = [c + a for c, a in zip(counters, active)]
            shifted = packed_temporal_shift(x, lengths, active, self.folds[b])
            x = block(x, shifted, record)
        self.shift_counts = counters
        return x

    def _padded_backbone(self, frames, lengths, record):
        # fixed-length baseline: clips zero-padded to the longest, shifted in every block
        n, t = len(lengths), max(lengths)
        padded = frames.new_zeros((n, t) + frames.shape[1:])
        for i, clip in enumerate(torch.split(frames, lengths)):
            padded[i, :clip.shape[0]] = clip
        x = self.stem(padded.flatten(0, 1))
        record.append(x.numel())
        for b, block in enumerate(self.blocks):
            x5 = x.view((n, t) + x.shape[1:])
            shifted = tsm_shift(x5, self.folds[b]).flatten(0, 1)
            x = block(x, shifted, record)
        self.shift_counts = [self.cfg.num_blocks] * n
        x = x.view((n, t) + x.shape[1:])
        return torch.cat([x[i, :l] for i, l in enumerate(lengths)], dim=0)

    def reduce(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.reduction == "avgpool":
            return x.mean(dim=(2, 3))
        return x.flatten(1)

    def forward(self, batch: PackedFrameBatch) -> list[torch.Tensor]:
        """Per-clip features, one (L_i, F) tensor per clip, unpadded."""
        lengths = list(batch.lengths)
        per_frame = self.reduce(self.backbone(batch))
        clips = torch.split(per_frame, lengths)
        t = max(lengths)
        padded = torch.stack([F.pad(c, (0, 0, 0, t - c.shape[0])) for c in clips])
        out = self.aggregate(padded.transpose(1, 2)).transpose(1, 2)
        return [out[i, :l] for i, l in enumerate(lengths)]


def tsam_forward(batch: PackedFrameBatch, encoder: TsamEncoder) -> list[FeatureSequence]:
    if sum(batch.lengths) != batch.frames.shape[0]:
        raise DataError("length list inconsistent with batch size")
    return [FeatureSequence(f) for f in encoder(batch)]


def peak_activation(encoder: TsamEncoder, batch: PackedFrameBatch) -> int:
    """Largest activation tensor (in elements) of one backbone pass."""
    with torch.no_grad():
        encoder.backbone(batch)
    return max(encoder.activation_sizes)
