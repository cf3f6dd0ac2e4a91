"""Training loop, evaluation, prediction and checkpoint I/O."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig, dataclass_from_dict, model_config_from_dict, model_config_to_dict
from .datamodel import Alphabet, FrameClip, KeypointClip, load_manifest
from .decoder import beam_decode, ctc_batch_losses, greedy_decode, min_frames
from .errors import DataError, FingerspellError
from .formats import load_checkpoint, read_frames, read_keypoints, save_checkpoint
from .metrics import EditCounts, accuracy_from_counts, edit_counts
from .model import FingerspellModel, ModelConfig, assemble, collate
from .numerics import rng
from .preprocessing import AugmentSpec, Sample, apply_pipeline, normalize_keypoints

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingError(FingerspellError):
    pass


def companion_paths(path: Path) -> tuple[Path, Path]:
    """Keypoint and frame files of a clip: same stem, ``.kpc`` / ``.frc``."""
    path = Path(path)
    return path.with_suffix(".kpc"), path.with_suffix(".frc")


def load_sample(path, cfg: ModelConfig, label=None, sample_id: str = "") -> Sample:
    kp_path, fr_path = companion_paths(path)
    keypoints = frames = None
    if cfg.uses_kp:
        keypoints = normalize_keypoints(KeypointClip(read_keypoints(kp_path)))
    if cfg.uses_rgb:
        frames = FrameClip(read_frames(fr_path))
        expected = (3, cfg.tsam.input_size, cfg.tsam.input_size)
        if frames.frames.shape[1:] != expected:
            raise DataError(f"{fr_path}: frames are {frames.frames.shape[1:]}, model expects {expected}")
    if keypoints is not None and frames is not None and keypoints.length != frames.length:
        raise DataError(f"{sample_id or path}: {keypoints.length} keypoint frames but {frames.length} RGB frames")
    return Sample(label, keypoints, frames, sample_id)


def load_samples(manifest, cfg: ModelConfig) -> list[Sample]:
    alphabet = Alphabet(cfg.alphabet)
    entries = load_manifest(manifest, alphabet, check_files=False)
    samples = []
    for e in entries:
        for p, needed in zip(companion_paths(e.path), (cfg.uses_kp, cfg.uses_rgb)):
            if needed and not p.is_file():
                raise DataError(f"sample {e.sample_id!r} references missing file {p}")
        samples.append(load_sample(e.path, cfg, e.label, e.sample_id))
    return samples


def model_to_header(model: FingerspellModel, train_cfg: TrainConfig | None, aug: AugmentSpec | None,
                    epoch: int, history: list) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "model": model_config_to_dict(model.cfg),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "augment": asdict(aug) if aug is not None else None,
        "epoch": epoch,
        "history": history,
    }


def save_model(path, model: FingerspellModel, train_cfg=None, aug=None, epoch: int = 0, history=()):
    params = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, model_to_header(model, train_cfg, aug, epoch, list(history)), params)


@dataclass
class Checkpoint:
    model: FingerspellModel
    train: TrainConfig | None
    augment: AugmentSpec | None
    epoch: int
    history: list


def load_model(path) -> Checkpoint:
    header, params = load_checkpoint(path)
    cfg = model_config_from_dict(header["model"])
    model = FingerspellModel(cfg)
    state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise DataError(f"{path}: checkpoint parameters do not match the model ({sorted(missing)[:5]})")
    model.load_state_dict(state)
    model.eval()
    train = dataclass_from_dict(TrainConfig, header["train"]) if header.get("train") else None
    aug = dataclass_from_dict(AugmentSpec, header["augment"]) if header.get("augment") else None
    return Checkpoint(model, train, aug, header.get("epoch", 0), header.get("history", []))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def batches(n: int, cfg: TrainConfig, epoch: int, lengths: Sequence[int] | None = None) -> list[list[int]]:
    """Seeded shuffled batches of sample indices for one epoch."""
    order = rng(cfg.seed, "shuffle", epoch).permutation(n)
    if cfg.length_bucketing and lengths is not None:
        order = sorted(order, key=lambda i: lengths[i])
        groups = [order[i:i + cfg.batch_clips] for i in range(0, n, cfg.batch_clips)]
        perm = rng(cfg.seed, "buckets", epoch).permutation(len(groups))
        return [list(map(int, groups[i])) for i in perm]
    return [list(map(int, order[i:i + cfg.batch_clips])) for i in range(0, n, cfg.batch_clips)]


def augment_sample(sample: Sample, spec: AugmentSpec, gen: np.random.Generator) -> Sample:
    out = apply_pipeline(sample, spec, gen)
    if out.length < min_frames(sample.label):
        return sample  # resampling left too few frames for the label
    return out


@dataclass
class EvalReport:
    accuracy: float
    rows: list = field(default_factory=list)  # (sample_id, reference, hypothesis, EditCounts)

    @property
    def counts(self) -> EditCounts:
        total = EditCounts()
        for *_, c in self.rows:
            total = total + c
        return total

    def mean_accuracy(self) -> float:
        return float(np.mean([accuracy_from_counts(c) for *_, c in self.rows]))

    def to_tsv(self) -> str:
        lines = ["sample_id\treference\thypothesis\tS\tD\tI\tN\taccuracy"]
        for sid, ref, hyp, c in self.rows:
            lines.append(f"{sid}\t{ref}\t{hyp}\t{c.substitutions}\t{c.deletions}\t{c.insertions}\t"
                         f"{c.ref_length}\t{accuracy_from_counts(c):.6f}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def decode_batch(model: FingerspellModel, samples: Sequence[Sample], beam: int | None = None) -> list:
    inp = collate(list(samples), model.cfg)
    lp = model(inp)
    out = []
    for i, t_len in enumerate(inp.lengths):
        row = lp[i, :t_len]
        out.append(greedy_decode(row) if beam is None else beam_decode(row, beam))
    return out


def evaluate(model: FingerspellModel, samples: Sequence[Sample], beam: int | None = None,
             batch_size: int = 16) -> EvalReport:
    """Decode every sample and pool edit counts into corpus letter accuracy."""
    if not samples:
        raise DataError("cannot evaluate an empty sample list")
    was_training = model.training
    model.eval()
    alphabet = model.alphabet
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        for s, hyp in zip(chunk, decode_batch(model, chunk, beam)):
            rows.append((s.sample_id, alphabet.decode(s.label), alphabet.decode(hyp), edit_counts(s.label, hyp)))
    model.train(was_training)
    report = EvalReport(0.0, rows)
    report.accuracy = accuracy_from_counts(report.counts)
    return report


def predict(model: FingerspellModel, sample: Sample, beam: int | None = None) -> str:
    model.eval()
    return model.alphabet.decode(decode_batch(model, [sample], beam)[0])


def train(model: FingerspellModel, train_samples: Sequence[Sample], val_samples: Sequence[Sample] | None,
          cfg: TrainConfig, aug: AugmentSpec | None = None, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train with AdamW and a multi-step schedule; keep the best validation model.

    Writes ``last.ckpt`` and ``best.ckpt`` to ``out_dir`` when given. With
    zero epochs only the initial model is saved.
    """
    if not train_samples:
        raise DataError("training set is empty")
    aug = aug or AugmentSpec()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = make_optimizer(model, cfg)
    history: list[dict] = []
    best_acc, best_state, best_epoch = -math.inf, copy.deepcopy(model.state_dict()), 0
    if out is not None:
        save_model(out / "last.ckpt", model, cfg, aug, 0, history)
        save_model(out / "best.ckpt", model, cfg, aug, 0, history)
    lengths = [s.length for s in train_samples]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(train_samples), cfg, epoch, lengths)):
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                batch = [augment_sample(s, aug, rng(cfg.seed, "augment", epoch, i)) for s, i in zip(batch, idx)]
            inp = collate(batch, model.cfg)
            lp = model(inp)
            losses = ctc_batch_losses(lp, [s.label for s in batch], inp.lengths)
            if not torch.isfinite(losses).all():
                bad = [s.sample_id for s, l in zip(batch, losses.detach().tolist()) if not math.isfinite(l)]
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}; samples {bad}")
            loss = losses.mean()
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": total / count}
        if val_samples:
            record["val_accuracy"] = evaluate(model, val_samples).accuracy
        history.append(record)
        log.info("epoch %d lr %.2e loss %.4f val %s", epoch + 1, lr, record["train_loss"],
                 f"{record['val_accuracy']:.4f}" if "val_accuracy" in record else "-")
        score = record.get("val_accuracy", -record["train_loss"])
        if score > best_acc:
            best_acc, best_state, best_epoch = score, copy.deepcopy(model.state_dict()), epoch + 1
            if out is not None:
                save_model(out / "best.ckpt", model, cfg, aug, epoch + 1, history)
        if out is not None:
            save_model(out / "last.ckpt", model, cfg, aug, epoch + 1, history)
        if on_epoch is not None:
            on_epoch(record)
    model.load_state_dict(best_state)
    model.eval()
    return Checkpoint(model, cfg, aug, best_epoch, history)


def build_and_train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples, val_samples,
                    aug: AugmentSpec | None = None, out_dir=None, on_epoch=None) -> Checkpoint:
    model = assemble(model_cfg, seed=train_cfg.seed)
    return train(model, train_samples, val_samples, train_cfg, aug, out_dir, on_epoch)
