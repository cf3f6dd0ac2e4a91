"""Missing-value handling, normalization and training augmentations.

All functions take and return clip objects (numpy-backed) and never modify
their input. Absent keypoints are exact zeros and stay exact zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .datamodel import FrameClip, KeypointClip, LabelSequence
from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def fill_missing(clip: KeypointClip) -> KeypointClip:
    coords = np.nan_to_num(clip.coords, nan=0.0, posinf=0.0, neginf=0.0)
    return replace(clip, coords=coords.astype(np.float32, copy=False))


def normalize_keypoints(clip: KeypointClip) -> KeypointClip:
    """Fill NaNs and clamp present (x, y) into [0, 1]."""
    clip = fill_missing(clip)
    present = clip.present()
    coords = clip.coords.copy()
    xy = np.clip(coords[..., :2], 0.0, 1.0)
    coords[..., :2] = np.where(present[..., None], xy, 0.0)
    return replace(clip, coords=coords)


def normalize_frames(clip: FrameClip, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> FrameClip:
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return FrameClip(((clip.frames - mean) / std).astype(np.float32))


def resample_indices(length: int, rate: float) -> np.ndarray:
    new_length = max(1, round(length * rate))
    return np.floor(np.arange(new_length) * length / new_length).astype(np.int64)


def resample(clip, rate: float):
    """Nearest-neighbour temporal resampling to max(1, round(T * rate)) frames."""
    if not 0.5 <= rate <= 1.5:
        raise ValueError(f"resample rate {rate} outside [0.5, 1.5]")
    idx = resample_indices(clip.length, rate)
    return _take_frames(clip, idx)


def _take_frames(clip, idx):
    if isinstance(clip, KeypointClip):
        return replace(clip, coords=clip.coords[idx])
    return FrameClip(clip.frames[idx])


def spatial_affine(clip: KeypointClip, scale: float = 1.0, shear: float = 0.0,
                   shift: float = 0.0, degrees: float = 0.0,
                   shift_y: float | None = None) -> KeypointClip:
    """Scale, shear and rotate (x, y) about the centroid of present keypoints, then shift.

    ``shift`` translates x (and y unless ``shift_y`` is given). z is left
    alone and absent keypoints stay at exactly zero.
    """
    present = clip.present()
    if not present.any():
        return clip
    coords = clip.coords.astype(np.float64)
    xy = coords[..., :2]
    centroid = xy[present].mean(axis=0)
    theta = math.radians(degrees)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ (scale * np.eye(2))
    offset = np.array([shift, shift if shift_y is None else shift_y])
    moved = (xy - centroid) @ mat.T + centroid + offset
    out = coords.copy()
    out[..., :2] = np.where(present[..., None], moved, 0.0)
    return replace(clip, coords=out.astype(np.float32))


def temporal_mask(clip: KeypointClip, size: float, start: int | None = None,
                  gen: np.random.Generator | None = None) -> KeypointClip:
    """Zero one contiguous window of round(size * T) frames."""
    if not 0.0 <= size <= 0.4:
        raise ValueError(f"temporal mask size {size} outside [0, 0.4]")
    t = clip.length
    width = round(size * t)
    if width == 0:
        return clip
    if start is None:
        gen = gen or np.random.default_rng()
        start = int(gen.integers(0, t - width + 1))
    coords = clip.coords.copy()
    coords[start:start + width] = 0.0
    return replace(clip, coords=coords)


def spatial_mask(clip: KeypointClip, size: float, center: tuple[float, float] | None = None,
                 gen: np.random.Generator | None = None) -> KeypointClip:
    """Zero every keypoint whose (x, y) falls inside an axis-aligned box.

    The box side is ``size`` times the extent of the present keypoints'
    bounding box along each axis ("relative" mode); the same box applies to
    every frame. ``center`` defaults to a uniform draw inside the bounding box.
    """
    present = clip.present()
    if not present.any():
        return clip
    xy = clip.coords[..., :2]
    lo = xy[present].min(axis=0)
    hi = xy[present].max(axis=0)
    if center is None:
        gen = gen or np.random.default_rng()
        center = lo + gen.random(2) * (hi - lo)
    half = 0.5 * size * (hi - lo)
    center = np.asarray(center)
    inside = np.all(np.abs(xy - center) <= half, axis=-1) & present
    coords = clip.coords.copy()
    coords[inside] = 0.0
    return replace(clip, coords=coords)


def horizontal_flip(clip):
    """Mirror a clip left to right.

    Keypoints: x -> 1 - x for present keypoints and left/right groups are
    exchanged. float32 input comes back as float64, where 1 - x is exact,
    so flipping twice restores the clip bitwise. Frames: columns reversed.
    """
    if isinstance(clip, FrameClip):
        return FrameClip(np.ascontiguousarray(clip.frames[..., ::-1]))
    present = clip.present()
    coords = clip.coords.astype(np.float64)
    coords[..., 0] = np.where(present, 1.0 - coords[..., 0], 0.0)
    coords = coords[:, clip.layout.flip_permutation()]
    return replace(clip, coords=coords)


def rotate_frames(clip: FrameClip, angle: float) -> FrameClip:
    """Bilinear rotation by ``angle`` degrees about the frame centre, zero fill."""
    if angle == 0:
        return clip
    out = ndimage.rotate(clip.frames, angle, axes=(3, 2), reshape=False, order=1,
                         mode="constant", cval=0.0, prefilter=False)
    return FrameClip(out.astype(np.float32))


@dataclass(frozen=True)
class AugmentSpec:
    """Parameter ranges and firing probabilities, one entry per augmentation."""

    resample_p: float = 0.8
    resample_rate: tuple = (0.5, 1.5)
    affine_p: float = 0.75
    affine_scale: tuple = (0.8, 1.2)
    affine_shear: tuple = (-0.15, 0.15)
    affine_shift: tuple = (-0.1, 0.1)
    affine_degrees: tuple = (-30.0, 30.0)
    temporal_mask_p: float = 0.5
    temporal_mask_size: tuple = (0.2, 0.4)
    spatial_mask_p: float = 0.5
    spatial_mask_size: tuple = (0.05, 0.1)
    flip_p: float = 0.5
    rotation_p: float = 0.5
    rotation_angle: tuple = (-10.0, 10.0)

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if name.endswith("_p") and not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment probability {name}={value} outside [0, 1]")
            if isinstance(value, tuple) and (len(value) != 2 or value[0] > value[1]):
                raise ConfigError(f"augment range {name}={value} must be (lo, hi) with lo <= hi")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(**{k: 0.0 for k in cls.__dataclass_fields__ if k.endswith("_p")})


@dataclass(eq=False)
class Sample:
    label: LabelSequence
    keypoints: KeypointClip | None = None
    frames: FrameClip | None = None
    sample_id: str = ""

    @property
    def length(self) -> int:
        clip = self.keypoints if self.keypoints is not None else self.frames
        return clip.length


def apply_pipeline(sample: Sample, spec: AugmentSpec, seed) -> Sample:
    """Run the augmentation table over one sample.

    Each augmentation fires independently with its probability, in table
    order. Keypoint-only augmentations never touch frames, and when both
    modalities are present only resampling, flipping and rotation run.
    """
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kp, fr = sample.keypoints, sample.frames
    has_kp, has_rgb = kp is not None, fr is not None
    kp_only = has_kp and not has_rgb

    def fires(p):
        return gen.random() < p

    def uniform(lo_hi):
        return float(gen.uniform(*lo_hi))

    if fires(spec.resample_p) and has_kp:
        idx = resample_indices(sample.length, uniform(spec.resample_rate))
        kp = _take_frames(kp, idx)
        if has_rgb:
            fr = _take_frames(fr, idx)
    if fires(spec.affine_p) and kp_only:
        kp = spatial_affine(kp, scale=uniform(spec.affine_scale), shear=uniform(spec.affine_shear),
                            shift=uniform(spec.affine_shift), shift_y=uniform(spec.affine_shift),
                            degrees=uniform(spec.affine_degrees))
    if fires(spec.temporal_mask_p) and kp_only:
        kp = temporal_mask(kp, uniform(spec.temporal_mask_size), gen=gen)
    if fires(spec.spatial_mask_p) and kp_only:
        kp = spatial_mask(kp, uniform(spec.spatial_mask_size), gen=gen)
    if fires(spec.flip_p):
        kp = horizontal_flip(kp) if has_kp else kp
        fr = horizontal_flip(fr) if has_rgb else fr
    if fires(spec.rotation_p) and has_rgb:
        fr = rotate_frames(fr, uniform(spec.rotation_angle))
    return Sample(sample.label, kp, fr, sample.sample_id)
