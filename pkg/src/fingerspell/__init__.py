"""Fingerspelling recognition from RGB frames and hand/pose keypoints."""

from .datamodel import Alphabet, FrameClip, KeypointClip, LabelSequence, pack_batch, pad_keypoint_batch
from .decoder import beam_decode, ctc_loss, greedy_decode
from .errors import ClipFormatError, ConfigError, DataError, FingerspellError
from .metrics import edit_counts, letter_accuracy
from .model import FingerspellModel, ModelConfig, assemble

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "FrameClip", "KeypointClip", "LabelSequence", "pack_batch", "pad_keypoint_batch",
    "beam_decode", "ctc_loss", "greedy_decode", "ClipFormatError", "ConfigError", "DataError",
    "FingerspellError", "edit_counts", "letter_accuracy", "FingerspellModel", "ModelConfig", "assemble",
]
