"""Core data types, batch construction and manifest loading.

Clips live as numpy arrays (they come straight off disk and go through the
numpy augmentation code); batches are torch tensors ready for the encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DataError

BLANK_INDEX = 0

# MediaPipe upper-body landmarks 11..22, alternating left/right.
POSE_LANDMARKS = (
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_pinky", "right_pinky",
    "left_index", "right_index",
    "left_thumb", "right_thumb",
)


@dataclass(frozen=True)
class KeypointLayout:
    """Index ranges of the keypoint groups inside the K axis.

    ``pose_pairs`` lists (left, right) index pairs relative to the start of
    the pose group; they are exchanged by a horizontal flip.
    """

    groups: tuple = (("left_hand", 0, 21), ("right_hand", 21, 42), ("pose", 42, 54))
    pose_pairs: tuple = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11))

    @property
    def num_keypoints(self) -> int:
        return max(stop for _, _, stop in self.groups)

    def group(self, name: str) -> range:
        for gname, start, stop in self.groups:
            if gname == name:
                return range(start, stop)
        raise KeyError(name)

    def indices(self, names: Sequence[str]) -> list[int]:
        """Keypoint indices of the selected groups, in layout order."""
        unknown = set(names) - {g for g, _, _ in self.groups}
        if unknown:
            raise KeyError(f"unknown keypoint groups: {sorted(unknown)}")
        out = []
        for gname, start, stop in self.groups:
            if gname in names:
                out.extend(range(start, stop))
        return out

    def flip_permutation(self) -> np.ndarray:
        """Permutation p such that flipped[:, k] = original[:, p[k]]."""
        perm = np.arange(self.num_keypoints)
        left, right = self.group("left_hand"), self.group("right_hand")
        if len(left) != len(right):
            raise ValueError("hand groups must have equal size to be swapped")
        perm[left.start:left.stop] = np.arange(right.start, right.stop)
        perm[right.start:right.stop] = np.arange(left.start, left.stop)
        pose = self.group("pose")
        for a, b in self.pose_pairs:
            perm[pose.start + a], perm[pose.start + b] = pose.start + b, pose.start + a
        return perm


DEFAULT_LAYOUT = KeypointLayout()


@dataclass(frozen=True)
class LabelSequence:
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        if any(i == BLANK_INDEX or i < 0 for i in self.indices):
            raise DataError(f"label contains blank or negative index: {self.indices}")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass(frozen=True)
class Alphabet:
    """Ordered character set; index 0 is reserved for the CTC blank."""

    symbols: str

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("alphabet must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"alphabet has duplicate symbols: {self.symbols!r}")

    blank_index = BLANK_INDEX

    @property
    def size(self) -> int:
        """Number of output classes including the blank."""
        return len(self.symbols) + 1

    def encode(self, text: str, sample_id: str | None = None) -> LabelSequence:
        out = []
        for ch in text:
            pos = self.symbols.find(ch)
            if pos < 0:
                where = f" in sample {sample_id!r}" if sample_id is not None else ""
                raise DataError(f"character {ch!r}{where} is not in the alphabet {self.symbols!r}")
            out.append(pos + 1)
        return LabelSequence(tuple(out))

    def decode(self, label: LabelSequence | Sequence[int]) -> str:
        return "".join(self.symbols[i - 1] for i in label)


@dataclass(frozen=True, eq=False)
class FrameClip:
    """RGB frames, shape (T, C, H, W), float32."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise DataError(f"frame clip must be (T>=1, C, H, W), got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class KeypointClip:
    """Keypoints, shape (T, K, 3) with the last axis ordered (x, y, z).

    A keypoint is absent in a frame when all three coordinates are exactly 0.
    """

    coords: np.ndarray
    layout: KeypointLayout = field(default=DEFAULT_LAYOUT)

    def __post_init__(self):
        c = self.coords
        if c.ndim != 3 or c.shape[0] < 1 or c.shape[2] != 3:
            raise DataError(f"keypoint clip must be (T>=1, K, 3), got {c.shape}")
        if c.shape[1] != self.layout.num_keypoints:
            raise DataError(f"expected {self.layout.num_keypoints} keypoints, got {c.shape[1]}")

    @property
    def length(self) -> int:
        return self.coords.shape[0]

    def present(self) -> np.ndarray:
        """Boolean (T, K) mask of present keypoints."""
        return np.any(self.coords != 0, axis=-1)


@dataclass(frozen=True, eq=False)
class PackedFrameBatch:
    """Frames of several clips concatenated along the first axis."""

    frames: torch.Tensor
    lengths: tuple[int, ...]

    def __post_init__(self):
        if any(l < 1 for l in self.lengths):
            raise DataError(f"every clip needs at least one frame: {self.lengths}")
        if sum(self.lengths) != self.frames.shape[0]:
            raise DataError(
                f"lengths sum to {sum(self.lengths)} but batch holds {self.frames.shape[0]} frames")

    @property
    def offsets(self) -> list[int]:
        return np.concatenate([[0], np.cumsum(self.lengths)]).tolist()

    def unpack(self) -> list[torch.Tensor]:
        return list(torch.split(self.frames, list(self.lengths)))


@dataclass(frozen=True, eq=False)
class PaddedKeypointBatch:
    """Keypoint clips as (bs, 3, N, K), zero beyond each clip's length."""

    coords: torch.Tensor
    lengths: tuple[int, ...]

    @property
    def max_length(self) -> int:
        return self.coords.shape[2]

    def frame_mask(self) -> torch.Tensor:
        """(bs, N) boolean mask of real frames."""
        return lengths_to_mask(self.lengths, self.max_length, self.coords.device)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    features: torch.Tensor  # (T, F)

    @property
    def length(self) -> int:
        return self.features.shape[0]


def lengths_to_mask(lengths, max_length: int, device=None) -> torch.Tensor:
    lengths = torch.as_tensor(lengths, device=device)
    return torch.arange(max_length, device=device)[None, :] < lengths[:, None]


def pack_batch(clips: Sequence[FrameClip], dtype=torch.float32) -> PackedFrameBatch:
    if not clips:
        raise DataError("cannot pack an empty list of clips")
    shape = clips[0].frames.shape[1:]
    for i, clip in enumerate(clips):
        if clip.frames.shape[1:] != shape:
            raise DataError(f"clip {i} has frame shape {clip.frames.shape[1:]}, expected {shape}")
    frames = torch.from_numpy(np.concatenate([c.frames for c in clips], axis=0)).to(dtype)
    return PackedFrameBatch(frames, tuple(c.length for c in clips))


def pad_keypoint_batch(clips: Sequence[KeypointClip], max_length: int | None = None,
                       dtype=torch.float32) -> PaddedKeypointBatch:
    """Stack keypoint clips into (bs, 3, N, K), N = longest clip.

    ``max_length`` pads further than the longest clip; used to test that
    the encoders ignore padding.
    """
    if not clips:
        raise DataError("cannot pad an empty list of clips")
    k = clips[0].coords.shape[1]
    for i, clip in enumerate(clips):
        if clip.coords.shape[1] != k:
            raise DataError(f"clip {i} has {clip.coords.shape[1]} keypoints, expected {k}")
    lengths = tuple(c.length for c in clips)
    n = max(lengths)
    if max_length is not None:
        if max_length < n:
            raise DataError(f"max_length {max_length} shorter than longest clip {n}")
        n = max_length
    out = np.zeros((len(clips), 3, n, k), dtype=np.float32)
    for i, clip in enumerate(clips):
        out[i, :, :clip.length, :] = clip.coords.transpose(2, 0, 1)
    return PaddedKeypointBatch(torch.from_numpy(out).to(dtype), lengths)


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: Path
    label: LabelSequence


def load_manifest(path, alphabet: Alphabet, check_files: bool = True) -> list[ManifestEntry]:
    """Read a TAB-separated manifest: ``sample_id  relative_path  label``.

    Paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 TAB-separated fields, got {len(fields)}")
            sample_id, rel, text = fields
            if sample_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
            seen.add(sample_id)
            label = alphabet.encode(text, sample_id=sample_id)
            clip_path = root / rel
            if check_files and not clip_path.is_file():
                raise DataError(f"{path}:{lineno}: sample {sample_id!r} references missing file {clip_path}")
            entries.append(ManifestEntry(sample_id, clip_path, label))
    return entries
