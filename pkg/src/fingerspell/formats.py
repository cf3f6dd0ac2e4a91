"""On-disk formats: keypoint clips, frame clips and checkpoints.

All integers are unsigned 32-bit little-endian and all tensors are
little-endian float32.

Keypoint clip::

    b"KPC1" | T | K | C (= 3) | T*K*C floats, frame-major, then keypoint, then (x, y, z)

Frame clip::

    b"FRC1" | T | C | H | W | T*C*H*W floats in that axis order

Checkpoint::

    b"FSCK" | version | header length | header (canonical JSON, UTF-8)
    | parameter count | per parameter: name length | name | ndim | dims... | floats
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ClipFormatError

KPC_MAGIC = b"KPC1"
FRC_MAGIC = b"FRC1"
CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
_F32 = np.dtype("<f4")


class _Reader:
    def __init__(self, path):
        self.path = Path(path)
        try:
            self.buf = self.path.read_bytes()
        except OSError as exc:
            raise ClipFormatError(path, 0, f"cannot read file ({exc.strerror})") from None
        self.pos = 0

    def fail(self, reason, offset=None):
        raise ClipFormatError(self.path, self.pos if offset is None else offset, reason)

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected):
        got = self.take(len(expected), "magic")
        if got != expected:
            self.fail(f"bad magic {got!r}, expected {expected!r}", 0)

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(np.float32)

    def done(self):
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} unexpected trailing bytes")


def write_keypoints(path, coords: np.ndarray) -> None:
    coords = np.asarray(coords)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ValueError(f"keypoints must be (T, K, 3), got {coords.shape}")
    t, k, c = coords.shape
    with open(path, "wb") as fh:
        fh.write(KPC_MAGIC + struct.pack("<III", t, k, c))
        fh.write(np.ascontiguousarray(coords, dtype=_F32).tobytes())


def read_keypoints(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(KPC_MAGIC)
    t, k = r.u32("frame count"), r.u32("keypoint count")
    c_at = r.pos
    c = r.u32("coordinate count")
    if c != 3:
        r.fail(f"coordinate count must be 3, got {c}", c_at)
    if t < 1:
        r.fail("clip has no frames", 4)
    data = r.floats(t * k * c, "keypoint data")
    r.done()
    return data.reshape(t, k, c)


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (T, C, H, W), got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(FRC_MAGIC + struct.pack("<IIII", *frames.shape))
        fh.write(np.ascontiguousarray(frames, dtype=_F32).tobytes())


def read_frames(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(FRC_MAGIC)
    shape = tuple(r.u32(name) for name in ("frame count", "channel count", "height", "width"))
    if shape[0] < 1:
        r.fail("clip has no frames", 4)
    data = r.floats(int(np.prod(shape)), "frame data")
    r.done()
    return data.reshape(shape)


def save_checkpoint(path, header: dict, params: dict) -> None:
    """Write ``header`` (JSON-serializable) and named float32 tensors."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(value, dtype=_F32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<II", len(encoded), arr.ndim) + encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    r = _Reader(path)
    r.magic(CKPT_MAGIC)
    at = r.pos
    version = r.u32("version")
    if version != CKPT_VERSION:
        r.fail(f"unsupported checkpoint version {version}", at)
    size = r.u32("header length")
    at = r.pos
    try:
        header = json.loads(r.take(size, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        r.fail(f"malformed header ({exc})", at)
    params = {}
    for _ in range(r.u32("parameter count")):
        name_len, ndim = r.u32("name length"), r.u32("rank")
        name = r.take(name_len, "parameter name").decode("utf-8")
        shape = tuple(r.u32("dimension") for _ in range(ndim))
        params[name] = r.floats(int(np.prod(shape, dtype=np.int64)), f"tensor {name}").reshape(shape)
    r.done()
    return header, params
