"""Keypoint encoder and convolution-module neck.

A padded keypoint batch (bs, 3, N, K) is treated like an image with x/y/z
as channels. Two 2D convolutions mix neighbouring frames and keypoints,
then the 32 resulting channels become a depth axis that a (5, 1, 1) "tube"
3D convolution sweeps with stride 3, leaving 10 values per keypoint and
frame. A linear layer maps those to F features per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import PaddedKeypointBatch
from .errors import ConfigError, DataError
from .numerics import conv_output_size


@dataclass(frozen=True)
class TpeConfig:
    c1: int = 16
    c2: int = 32
    tube_kernel: int = 5
    tube_stride: int = 3
    tube_out: int = 10
    num_keypoints: int = 54
    feature_dim: int = 192
    conv_modules: int = 1
    conv_kernel: int = 7
    expansion: int = 2

    def __post_init__(self):
        if conv_output_size(self.c2, self.tube_kernel, self.tube_stride) != self.tube_out:
            raise ConfigError(
                f"tube ({self.tube_kernel}, stride {self.tube_stride}) over {self.c2} channels "
                f"does not give {self.tube_out}")
        if self.conv_modules < 0:
            raise ConfigError("tpe.conv_modules must be >= 0")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("tpe.conv_kernel must be odd")

    @classmethod
    def full(cls, **overrides) -> "TpeConfig":
        return cls(**{"feature_dim": 512, **overrides})


class TemporalPoseEncoder(nn.Module):
    def __init__(self, cfg: TpeConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(3, cfg.c1, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.c1, cfg.c2, 3, padding=1)
        self.tube = nn.Conv3d(1, 1, (cfg.tube_kernel, 1, 1), stride=(cfg.tube_stride, 1, 1))
        self.proj = nn.Linear(cfg.tube_out * cfg.num_keypoints, cfg.feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward(self, coords: torch.Tensor, mask: torch.Tensor | None = None,
                trace: list | None = None) -> torch.Tensor:
        """(bs, 3, N, K) -> (bs, N, F); padded frames come out as zeros."""
        if coords.shape[1] != 3 or coords.shape[-1] != self.cfg.num_keypoints:
            raise DataError(
                f"expected (bs, 3, N, {self.cfg.num_keypoints}) keypoints, got {tuple(coords.shape)}")
        m4 = None if mask is None else mask[:, None, :, None].to(coords.dtype)
        x = coords if m4 is None else coords * m4
        x = F.relu(self.conv1(x))
        x = x if m4 is None else x * m4
        x = F.relu(self.conv2(x))
        x = x if m4 is None else x * m4
        if trace is not None:
            trace.append(tuple(x.shape))
        x = x.unsqueeze(1)  # (bs, 1, 32, N, K)
        if trace is not None:
            trace.append(tuple(x.shape))
        x = self.tube(x)  # (bs, 1, 10, N, K)
        x = x if m4 is None else x * m4[:, None]
        if trace is not None:
            trace.append(tuple(x.shape))
        bs, _, d, n, k = x.shape
        x = x[:, 0].permute(0, 2, 1, 3).reshape(bs, n, d * k)
        x = self.proj(x)
        if mask is not None:
            x = x * mask[..., None].to(x.dtype)
        if trace is not None:
            trace.append(tuple(x.shape))
        return x


def tpe_forward(batch: PaddedKeypointBatch, encoder: TemporalPoseEncoder) -> tuple[torch.Tensor, tuple]:
    return encoder(batch.coords, batch.frame_mask()), batch.lengths


class ConvModule(nn.Module):
    """Conformer-style convolution module with a residual connection.

    norm -> pointwise expansion + GLU -> depthwise temporal conv -> norm ->
    swish -> pointwise projection, added to the input. Normalization is
    per frame.
    """

    def __init__(self, dim: int, kernel: int = 7, expansion: int = 2):
        super().__init__()
        self.norm_in = nn.LayerNorm(dim)
        self.pointwise_in = nn.Linear(dim, expansion * dim)
        inner = expansion * dim // 2
        self.depthwise = nn.Conv1d(inner, inner, kernel, padding=kernel // 2, groups=inner)
        self.norm_mid = nn.LayerNorm(inner)
        self.pointwise_out = nn.Linear(inner, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """x is (bs, T, F) or (T, F); ``mask`` (bs, T) marks real frames."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        m = None if mask is None else mask[..., None].to(x.dtype)
        h = F.glu(self.pointwise_in(self.norm_in(x)), dim=-1)
        if m is not None:
            h = h * m
        h = self.depthwise(h.transpose(1, 2)).transpose(1, 2)
        h = self.pointwise_out(F.silu(self.norm_mid(h)))
        out = x + h
        if m is not None:
            out = out * m
        return out.squeeze(0) if squeeze else out


def conv_module(features: torch.Tensor, module: ConvModule) -> torch.Tensor:
    return module(features)
