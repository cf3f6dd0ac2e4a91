"""Model assembly: RGB, keypoint and fused variants sharing one decoder head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import (DEFAULT_LAYOUT, Alphabet, FeatureSequence, KeypointLayout, PackedFrameBatch,
                        PaddedKeypointBatch, lengths_to_mask, pack_batch, pad_keypoint_batch)
from .decoder import DecoderHead
from .errors import ConfigError, DataError
from .numerics import init_parameters
from .preprocessing import IMAGENET_MEAN, IMAGENET_STD, Sample, normalize_frames
from .tpe import ConvModule, TemporalPoseEncoder, TpeConfig
from .tsam import TsamConfig, TsamEncoder

MODALITIES = ("rgb", "kp", "rgb+kp")
FUSIONS = ("sum", "concat", "product", "weighted")
KEYPOINT_GROUPS = ("left_hand", "right_hand", "pose")


@dataclass(frozen=True)
class ModelConfig:
    modality: str = "kp"
    alphabet: str = "abcdef"
    tsam: TsamConfig = field(default_factory=TsamConfig)
    tpe: TpeConfig = field(default_factory=TpeConfig)
    rnn: str = "gru"
    hidden: int = 128
    layers: int = 2
    fusion: str = "sum"
    fusion_weights: tuple = (0.5, 0.5)
    keypoint_groups: tuple = KEYPOINT_GROUPS
    frame_mean: tuple = IMAGENET_MEAN
    frame_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"model.modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"model.fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.rnn != "none" and self.layers < 1:
            raise ConfigError("decoder.layers must be >= 1")
        if self.modality == "rgb+kp" and self.tsam.feature_dim != self.tpe.feature_dim:
            raise ConfigError(f"fusion needs equal feature sizes, got tsam {self.tsam.feature_dim} "
                              f"and tpe {self.tpe.feature_dim}")
        try:
            Alphabet(self.alphabet)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = set(self.keypoint_groups) - set(KEYPOINT_GROUPS)
        if bad or not self.keypoint_groups:
            raise ConfigError(f"model.keypoint_groups must be a non-empty subset of {KEYPOINT_GROUPS}")
        if len(self.fusion_weights) != 2:
            raise ConfigError("model.fusion_weights needs two values")

    @property
    def uses_rgb(self) -> bool:
        return self.modality in ("rgb", "rgb+kp")

    @property
    def uses_kp(self) -> bool:
        return self.modality in ("kp", "rgb+kp")

    @property
    def feature_dim(self) -> int:
        return self.tsam.feature_dim if self.modality == "rgb" else self.tpe.feature_dim


def fuse(a, b, mode: str = "sum", weights=(0.5, 0.5)):
    """Combine two time-aligned feature tensors (.., T, F)."""
    wrap = isinstance(a, FeatureSequence)
    x = a.features if wrap else a
    y = b.features if isinstance(b, FeatureSequence) else b
    if x.shape[:-1] != y.shape[:-1] or (mode != "concat" and x.shape != y.shape):
        raise DataError(f"cannot fuse features of shapes {tuple(x.shape)} and {tuple(y.shape)}")
    if mode == "sum":
        out = x + y
    elif mode == "concat":
        out = torch.cat([x, y], dim=-1)
    elif mode == "product":
        out = x * y
    elif mode == "weighted":
        out = weights[0] * x + weights[1] * y
    else:
        raise ConfigError(f"unknown fusion {mode!r}")
    return FeatureSequence(out) if wrap else out


@dataclass(eq=False)
class ModelInput:
    lengths: tuple
    frames: PackedFrameBatch | None = None
    keypoints: PaddedKeypointBatch | None = None


def collate(samples: list[Sample], cfg: ModelConfig, max_length: int | None = None) -> ModelInput:
    """Batch samples for ``cfg.modality``; frames are normalized here."""
    if not samples:
        raise DataError("empty batch")
    frames = keypoints = None
    if cfg.uses_kp:
        missing = [s.sample_id for s in samples if s.keypoints is None]
        if missing:
            raise DataError(f"samples without keypoints: {missing}")
        keypoints = pad_keypoint_batch([s.keypoints for s in samples], max_length=max_length)
    if cfg.uses_rgb:
        missing = [s.sample_id for s in samples if s.frames is None]
        if missing:
            raise DataError(f"samples without frames: {missing}")
        frames = pack_batch([normalize_frames(s.frames, cfg.frame_mean, cfg.frame_std) for s in samples])
    if frames is not None and keypoints is not None and frames.lengths != keypoints.lengths:
        bad = [s.sample_id for s, a, b in zip(samples, frames.lengths, keypoints.lengths) if a != b]
        raise DataError(f"frame and keypoint lengths differ for samples {bad}")
    lengths = frames.lengths if frames is not None else keypoints.lengths
    return ModelInput(tuple(lengths), frames, keypoints)


class FingerspellModel(nn.Module):
    def __init__(self, cfg: ModelConfig, layout: KeypointLayout = DEFAULT_LAYOUT):
        super().__init__()
        self.cfg = cfg
        self.alphabet = Alphabet(cfg.alphabet)
        self.tsam = TsamEncoder(cfg.tsam) if cfg.uses_rgb else None
        self.tpe = None
        self.necks = nn.ModuleList()
        if cfg.uses_kp:
            idx = layout.indices(cfg.keypoint_groups)
            self.register_buffer("kp_index", torch.tensor(idx, dtype=torch.int64), persistent=False)
            tpe_cfg = replace(cfg.tpe, num_keypoints=len(idx))
            self.tpe = TemporalPoseEncoder(tpe_cfg)
            self.necks = nn.ModuleList(ConvModule(tpe_cfg.feature_dim, tpe_cfg.conv_kernel, tpe_cfg.expansion)
                                       for _ in range(tpe_cfg.conv_modules))
        width = cfg.feature_dim * (2 if cfg.modality == "rgb+kp" and cfg.fusion == "concat" else 1)
        self.head = DecoderHead(width, self.alphabet.size, cfg.rnn, cfg.hidden, cfg.layers)

    def encode_rgb(self, frames: PackedFrameBatch, max_length: int) -> torch.Tensor:
        seqs = self.tsam(frames)
        return torch.stack([F.pad(s, (0, 0, 0, max_length - s.shape[0])) for s in seqs])

    def encode_kp(self, keypoints: PaddedKeypointBatch) -> torch.Tensor:
        coords = keypoints.coords.index_select(-1, self.kp_index)
        mask = keypoints.frame_mask()
        x = self.tpe(coords, mask)
        for neck in self.necks:
            x = neck(x, mask)
        return x

    def encode(self, inp: ModelInput) -> torch.Tensor:
        """Padded features (bs, N, F'), zero past each sample's length."""
        rgb = kp = None
        if self.cfg.uses_kp:
            kp = self.encode_kp(inp.keypoints)
        n = kp.shape[1] if kp is not None else max(inp.lengths)
        if self.cfg.uses_rgb:
            rgb = self.encode_rgb(inp.frames, n)
        if rgb is not None and kp is not None:
            out = fuse(rgb, kp, self.cfg.fusion, self.cfg.fusion_weights)
            return out * lengths_to_mask(inp.lengths, n)[..., None].to(out.dtype)
        return rgb if rgb is not None else kp

    def forward(self, inp: ModelInput) -> torch.Tensor:
        """Per-frame log-probabilities (bs, N, |A| + 1)."""
        return self.head(self.encode(inp), inp.lengths)


def assemble(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> FingerspellModel:
    model = FingerspellModel(cfg)
    init_parameters(model, seed)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in model.parameters()))
