"""Recurrent decoder head, CTC loss and CTC decoding.

The loss is the log-space forward-backward recursion over the
blank-interleaved label, written in numpy (double precision) and exposed
to torch through a custom autograd function so training uses the same
code the tests check against brute-force path enumeration.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from .datamodel import BLANK_INDEX, LabelSequence
from .errors import ConfigError, CTCInfeasibleError
from .numerics import BiRNN, linear, log_softmax

RNN_TYPES = ("gru", "lstm", "none")


class DecoderHead(nn.Module):
    """Stacked bidirectional RNN, then a linear layer and log-softmax per frame."""

    def __init__(self, in_dim: int, num_classes: int, rnn: str = "gru",
                 hidden: int = 128, layers: int = 2):
        super().__init__()
        if rnn not in RNN_TYPES:
            raise ConfigError(f"decoder.rnn must be one of {RNN_TYPES}, got {rnn!r}")
        if rnn != "none" and layers < 1:
            raise ConfigError("decoder.layers must be >= 1")
        self.in_dim = in_dim
        self.rnn = None if rnn == "none" else BiRNN(in_dim, hidden, layers, cell=rnn)
        out_in = in_dim if self.rnn is None else self.rnn.output_size
        self.classifier = nn.Linear(out_in, num_classes)

    def forward(self, features: torch.Tensor, lengths) -> torch.Tensor:
        """(bs, T, F) features -> (bs, T, V) log-probabilities."""
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"decoder expects {self.in_dim} features, got {features.shape[-1]}")
        h = features if self.rnn is None else self.rnn(features, lengths)
        return log_softmax(linear(h, self.classifier.weight, self.classifier.bias))


def decode_head(features: torch.Tensor, head: DecoderHead, length: int | None = None) -> torch.Tensor:
    """Single sequence (T, F) -> (T, V)."""
    length = features.shape[0] if length is None else length
    return head(features.unsqueeze(0), [length])[0]


def min_frames(label) -> int:
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _extend(label, blank):
    ext = [blank]
    for c in label:
        ext += [c, blank]
    return np.asarray(ext, dtype=np.int64)


def _shift(v, k):
    # out[s] = v[s - k], -inf where that index falls outside v
    out = np.full_like(v, -np.inf)
    if k > 0:
        out[k:] = v[:len(v) - k]
    else:
        out[:len(v) + k] = v[-k:]
    return out


def ctc_loss(lp, label, blank: int = BLANK_INDEX, with_grad: bool = True):
    """Negative log-probability of ``label`` under per-frame log-probs ``lp`` (T, V).

    Returns ``(loss, grad)`` where grad is d loss / d lp with lp treated
    as free variables, or just the loss when ``with_grad`` is False.
    Raises CTCInfeasibleError when T is too short for the label.
    """
    lp = np.asarray(lp, dtype=np.float64)
    label = list(label)
    t_len, _ = lp.shape
    need = min_frames(label)
    if t_len < need:
        raise CTCInfeasibleError(f"label of length {len(label)} needs {need} frames, got {t_len}")
    ext = _extend(label, blank)
    s_len = len(ext)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # (T, S)
    neg = -np.inf

    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.full((t_len, s_len), neg)
        alpha[0, 0] = emit[0, 0]
        if s_len > 1:
            alpha[0, 1] = emit[0, 1]
        for t in range(1, t_len):
            a = alpha[t - 1]
            acc = np.logaddexp(a, _shift(a, 1))
            acc = np.where(skip, np.logaddexp(acc, _shift(a, 2)), acc)
            alpha[t] = acc + emit[t]
        log_p = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        loss = float(-log_p)
        if not with_grad:
            return loss

        # skip_next[s]: transition s -> s + 2 allowed
        skip_next = np.zeros(s_len, dtype=bool)
        skip_next[:-2] = skip[2:]
        beta = np.full((t_len, s_len), neg)
        beta[-1, -1] = emit[-1, -1]
        if s_len > 1:
            beta[-1, -2] = emit[-1, -2]
        for t in range(t_len - 2, -1, -1):
            b = beta[t + 1]
            acc = np.logaddexp(b, _shift(b, -1))
            acc = np.where(skip_next, np.logaddexp(acc, _shift(b, -2)), acc)
            beta[t] = acc + emit[t]
        occupancy = np.exp(alpha + beta - emit - log_p)
    occupancy = np.nan_to_num(occupancy, nan=0.0)
    grad = np.zeros_like(lp)
    np.add.at(grad, (slice(None), ext), occupancy)
    return loss, -grad


@lru_cache(maxsize=64)
def _all_paths(t_len: int, vocab: int, blank: int):
    paths = np.array(list(itertools.product(range(vocab), repeat=t_len)), dtype=np.int64)
    if paths.size == 0:
        paths = paths.reshape(0, t_len)
    collapsed = [collapse(p, blank) for p in paths.tolist()]
    return paths, collapsed


def collapse(path, blank: int = BLANK_INDEX) -> tuple:
    """Merge consecutive repeats, then drop blanks."""
    return tuple(k for k, _ in itertools.groupby(path) if k != blank)


def ctc_path_probability_bruteforce(lp, label, blank: int = BLANK_INDEX, max_paths: int = 1 << 16) -> float:
    """Sum of path probabilities over every length-T path collapsing to ``label``."""
    lp = np.asarray(lp, dtype=np.float64)
    t_len, vocab = lp.shape
    if vocab ** t_len > max_paths:
        raise ValueError(f"{vocab}^{t_len} paths is too many to enumerate")
    paths, collapsed = _all_paths(t_len, vocab, blank)
    target = tuple(label)
    hits = np.array([c == target for c in collapsed], dtype=bool)
    if not hits.any():
        return 0.0
    scores = lp[np.arange(t_len)[None, :], paths[hits]].sum(axis=1)
    return float(np.exp(scores).sum())


def ctc_loss_bruteforce(lp, label, blank: int = BLANK_INDEX) -> float:
    p = ctc_path_probability_bruteforce(lp, label, blank)
    return math.inf if p == 0.0 else -math.log(p)


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, labels, lengths, blank):
        lp = log_probs.detach().cpu().double().numpy()
        losses = np.zeros(len(labels))
        grads = np.zeros_like(lp)
        for i, (label, t_len) in enumerate(zip(labels, lengths)):
            losses[i], grads[i, :t_len] = ctc_loss(lp[i, :t_len], label, blank)
        ctx.save_for_backward(torch.from_numpy(grads).to(log_probs))
        return torch.from_numpy(losses).to(log_probs)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        return grad_out[:, None, None] * grads, None, None, None


def ctc_batch_losses(log_probs: torch.Tensor, labels, lengths, blank: int = BLANK_INDEX) -> torch.Tensor:
    """Per-sample CTC losses for padded log-probs (bs, T, V)."""
    labels = [tuple(l) for l in labels]
    lengths = [int(l) for l in lengths]
    return _CTCFunction.apply(log_probs, labels, lengths, blank)


def ctc_batch_loss(log_probs: torch.Tensor, labels, lengths, blank: int = BLANK_INDEX) -> torch.Tensor:
    """Mean over samples of the per-sample loss."""
    return ctc_batch_losses(log_probs, labels, lengths, blank).mean()


def greedy_decode(lp, blank: int = BLANK_INDEX) -> LabelSequence:
    lp = lp.detach().cpu().numpy() if isinstance(lp, torch.Tensor) else np.asarray(lp)
    return LabelSequence(collapse(lp.argmax(axis=-1).tolist(), blank))


def beam_decode(lp, width: int, blank: int = BLANK_INDEX) -> LabelSequence:
    """CTC prefix beam search.

    Each prefix keeps separate log-probabilities for paths ending in blank
    and in its last symbol. Equal scores are broken in favour of the
    lexicographically smaller prefix, both when pruning and at the end.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    lp = lp.detach().cpu().double().numpy() if isinstance(lp, torch.Tensor) else np.asarray(lp, np.float64)
    neg = -math.inf
    beams = {(): (0.0, neg)}  # prefix -> (log p ending blank, log p ending non-blank)

    def total(v):
        return np.logaddexp(v[0], v[1])

    for row in lp:
        nxt: dict = {}

        def add(prefix, pb, pnb):
            ob, onb = nxt.get(prefix, (neg, neg))
            nxt[prefix] = (np.logaddexp(ob, pb), np.logaddexp(onb, pnb))

        for prefix, (pb, pnb) in beams.items():
            p_all = np.logaddexp(pb, pnb)
            for k, lk in enumerate(row):
                if k == blank:
                    add(prefix, p_all + lk, neg)
                elif prefix and prefix[-1] == k:
                    add(prefix, neg, pnb + lk)
                    add(prefix + (k,), neg, pb + lk)
                else:
                    add(prefix + (k,), neg, p_all + lk)
        ranked = sorted(nxt.items(), key=lambda kv: (-total(kv[1]), kv[0]))
        beams = dict(ranked[:width])
    best = min(beams.items(), key=lambda kv: (-total(kv[1]), kv[0]))
    return LabelSequence(best[0])
