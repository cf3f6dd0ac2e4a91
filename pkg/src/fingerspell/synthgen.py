"""Synthetic fingerspelling data for desk-scale training and tests.

Every letter owns a prototype right-hand configuration (21 keypoints). A
word is rendered by holding each letter's prototype for a few frames and
moving linearly to the next one. Between two identical letters the hand
drops out of view for the transition frames, so doubled letters stay
recoverable. Frame clips draw the same keypoints as small discs: left hand
in channel 0, right hand in channel 1, pose in channel 2.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datamodel import DEFAULT_LAYOUT, Alphabet, FrameClip, KeypointClip, LabelSequence
from .decoder import collapse
from .errors import ConfigError, DataError
from .formats import write_frames, write_keypoints
from .numerics import rng

# resting upper body: shoulders, elbows, wrists, then finger bases (left, right alternating)
POSE_TEMPLATE = np.array([
    [0.38, 0.80], [0.62, 0.80],
    [0.30, 0.92], [0.70, 0.92],
    [0.32, 0.98], [0.68, 0.98],
    [0.31, 0.99], [0.69, 0.99],
    [0.33, 0.99], [0.67, 0.99],
    [0.34, 0.98], [0.66, 0.98],
])


@dataclass(frozen=True)
class SynthConfig:
    alphabet_size: int = 6
    word_min: int = 2
    word_max: int = 5
    frames_min: int = 3
    frames_max: int = 8
    trans_min: int = 1
    trans_max: int = 3
    sigma: float = 0.01
    frame_size: int = 32
    disc_radius: float = 1.2
    n_train: int = 300
    n_val: int = 0
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (("word_min", "word_max"), ("frames_min", "frames_max"), ("trans_min", "trans_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise ConfigError(f"synth.{lo} must not exceed synth.{hi}")
        if self.word_min < 1 or self.frames_min < 1 or self.trans_min < 0:
            raise ConfigError("synth word and frame ranges must be positive")
        if not 1 <= self.alphabet_size <= 26:
            raise ConfigError("synth.alphabet_size must be in 1..26")
        if self.sigma < 0:
            raise ConfigError("synth.sigma must be >= 0")

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(string.ascii_lowercase[:self.alphabet_size])


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def make_prototypes(cfg: SynthConfig, max_tries: int = 1000) -> np.ndarray:
    """(A, 21, 3) right-hand prototypes, one per letter.

    Prototypes are pairwise at least max(5 sigma, 0.5) apart in (x, y), and
    no prototype lies within half that distance of the straight path
    between two others.
    """
    gen = rng(cfg.seed, "prototypes")
    n = cfg.alphabet_size
    min_sep = max(5 * cfg.sigma, 0.5)
    for _ in range(max_tries):
        xy = gen.uniform(0.2, 0.8, size=(n, 21, 2))
        z = gen.uniform(-0.05, 0.05, size=(n, 21, 1))
        flat = xy.reshape(n, -1)
        dist = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
        if n > 1 and dist[~np.eye(n, dtype=bool)].min() < min_sep:
            continue
        ok = all(_segment_distance(flat[c], flat[a], flat[b]) >= min_sep / 2
                 for a in range(n) for b in range(n) for c in range(n)
                 if len({a, b, c}) == 3)
        if ok:
            return np.concatenate([xy, z], axis=-1)
    raise ConfigError("could not place well-separated prototypes; lower synth.sigma")


def _pose_frame(n_frames: int) -> np.ndarray:
    pose = np.zeros((12, 3))
    pose[:, :2] = POSE_TEMPLATE
    return np.broadcast_to(pose, (n_frames, 12, 3)).copy()


def word_timeline(word: str, cfg: SynthConfig, gen: np.random.Generator):
    """Per-letter hold durations and per-gap transition lengths."""
    holds = gen.integers(cfg.frames_min, cfg.frames_max + 1, size=len(word))
    gaps = gen.integers(cfg.trans_min, cfg.trans_max + 1, size=max(len(word) - 1, 0))
    return holds, gaps


def generate_sample(word: str, cfg: SynthConfig, seed: int, prototypes: np.ndarray | None = None,
                    render: bool = True):
    """Keypoint clip, frame clip (None when ``render`` is False) and label for ``word``.

    Fully determined by (word, cfg, seed).
    """
    alphabet = cfg.alphabet
    label = alphabet.encode(word)
    if len(word) == 0:
        raise DataError("cannot render an empty word")
    protos = make_prototypes(cfg) if prototypes is None else prototypes
    gen = rng(seed, "sample", word)
    holds, gaps = word_timeline(word, cfg, gen)
    hand = []  # per frame: (21, 3) array or None when the hand is out of view
    for i, idx in enumerate(label):
        hand.extend([protos[idx - 1]] * int(holds[i]))
        if i + 1 < len(label):
            nxt = label.indices[i + 1]
            n = int(gaps[i])
            if nxt == idx:
                hand.extend([None] * n)
            else:
                for j in range(1, n + 1):
                    w = j / (n + 1)
                    hand.append((1 - w) * protos[idx - 1] + w * protos[nxt - 1])
    t = len(hand)
    coords = np.zeros((t, DEFAULT_LAYOUT.num_keypoints, 3))
    right, pose = DEFAULT_LAYOUT.group("right_hand"), DEFAULT_LAYOUT.group("pose")
    coords[:, pose.start:pose.stop] = _pose_frame(t)
    for f, h in enumerate(hand):
        if h is not None:
            coords[f, right.start:right.stop] = h
    present = np.any(coords != 0, axis=-1)
    if cfg.sigma > 0:
        noise = gen.normal(0.0, cfg.sigma, size=coords.shape)
        coords = np.where(present[..., None], coords + noise, 0.0)
        coords[..., :2] = np.where(present[..., None], np.clip(coords[..., :2], 0.0, 1.0), 0.0)
    kp = KeypointClip(coords.astype(np.float32))
    frames = render_frames(kp, cfg.frame_size, cfg.disc_radius) if render else None
    return kp, frames, label


def render_frames(clip: KeypointClip, size: int = 32, radius: float = 1.2) -> FrameClip:
    """Draw present keypoints as discs on a black (T, 3, size, size) canvas."""
    t = clip.length
    out = np.zeros((t, 3, size, size), dtype=np.float32)
    centers = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    present = clip.present()
    for channel, name in enumerate(("left_hand", "right_hand", "pose")):
        grp = clip.layout.group(name)
        n = len(grp)
        levels = np.full(n, 0.8) if name == "pose" else 0.4 + 0.6 * np.arange(n) / max(n - 1, 1)
        for f in range(t):
            pts = clip.coords[f, grp.start:grp.stop, :2]
            keep = present[f, grp.start:grp.stop]
            if not keep.any():
                continue
            d2 = ((xx[None] - pts[keep, 0, None, None]) ** 2 + (yy[None] - pts[keep, 1, None, None]) ** 2)
            hit = d2 <= (radius / size) ** 2
            out[f, channel] = np.max(np.where(hit, levels[keep, None, None], 0.0), axis=0)
    return FrameClip(out)


def nearest_prototype_decode(clip: KeypointClip, prototypes: np.ndarray, cfg: SynthConfig) -> LabelSequence:
    """Label frames by the closest prototype (blank when the hand is absent or
    no prototype is near), then collapse."""
    right = clip.layout.group("right_hand")
    hand = clip.coords[:, right.start:right.stop, :2].reshape(clip.length, -1)
    flat = prototypes[..., :2].reshape(len(prototypes), -1)
    sep = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    threshold = (sep[~np.eye(len(flat), dtype=bool)].min() if len(flat) > 1 else 1.0) / 5
    path = []
    for f in range(clip.length):
        if not np.any(hand[f]):
            path.append(0)
            continue
        d = np.linalg.norm(flat - hand[f], axis=-1)
        k = int(d.argmin())
        path.append(k + 1 if d[k] < threshold else 0)
    return LabelSequence(collapse(path))


def vocabulary_size(cfg: SynthConfig) -> int:
    return sum(cfg.alphabet_size ** n for n in range(cfg.word_min, cfg.word_max + 1))


def sample_words(cfg: SynthConfig, count: int) -> list[str]:
    """``count`` distinct words, lengths drawn uniformly from the allowed range."""
    if count > vocabulary_size(cfg):
        raise DataError(f"requested {count} distinct words but only {vocabulary_size(cfg)} exist")
    gen = rng(cfg.seed, "words")
    letters = cfg.alphabet.symbols
    seen: dict[str, None] = {}
    attempts = 0
    while len(seen) < count and attempts < 50 * count + 10_000:
        attempts += 1
        n = int(gen.integers(cfg.word_min, cfg.word_max + 1))
        seen.setdefault("".join(letters[i] for i in gen.integers(0, len(letters), size=n)), None)
    if len(seen) < count:
        # nearly the whole vocabulary was requested: fill from an exhaustive listing
        rest = ["".join(p) for n in range(cfg.word_min, cfg.word_max + 1)
                for p in itertools.product(letters, repeat=n) if "".join(p) not in seen]
        for i in gen.permutation(len(rest))[:count - len(seen)]:
            seen[rest[i]] = None
    return list(seen)


def generate_dataset(cfg: SynthConfig, out_dir, n_train: int | None = None, n_test: int | None = None,
                     n_val: int | None = None, render: bool = True) -> dict[str, Path]:
    """Write clips and TAB-separated manifests with disjoint word lists per split.

    Returns the manifest path per split name.
    """
    n_train = cfg.n_train if n_train is None else n_train
    n_test = cfg.n_test if n_test is None else n_test
    n_val = cfg.n_val if n_val is None else n_val
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    words = sample_words(cfg, n_train + n_val + n_test)
    splits = {"train": words[:n_train], "val": words[n_train:n_train + n_val],
              "test": words[n_train + n_val:]}
    protos = make_prototypes(cfg)
    manifests = {}
    for split, split_words in splits.items():
        if not split_words:
            continue
        lines = []
        for i, word in enumerate(split_words):
            sid = f"{split}_{i:05d}"
            kp, frames, _ = generate_sample(word, cfg, seed=int(rng(cfg.seed, split, i).integers(2**62)),
                                            prototypes=protos, render=render)
            write_keypoints(out / "clips" / f"{sid}.kpc", kp.coords)
            if frames is not None:
                write_frames(out / "clips" / f"{sid}.frc", frames.frames)
            lines.append(f"{sid}\tclips/{sid}.kpc\t{word}\n")
        path = out / f"{split}.tsv"
        path.write_text("".join(lines), encoding="utf-8")
        manifests[split] = path
    (out / "alphabet.txt").write_text(cfg.alphabet.symbols + "\n", encoding="utf-8")
    return manifests


def with_fixed_timing(cfg: SynthConfig, frames: int, transitions: int) -> SynthConfig:
    return replace(cfg, frames_min=frames, frames_max=frames, trans_min=transitions, trans_max=transitions)
