"""Numeric kernels shared by the encoders and the decoder head.

Torch supplies the tensor math and autograd; this module fixes the
conventions (shape checks, initialization, seeding, length-aware recurrent
layers) and provides a finite-difference gradient checker that is
independent of autograd.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

_CONV = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}


def rng(seed: int, *stream: str | int) -> np.random.Generator:
    """Independent generator for one consumer of the run seed.

    ``rng(seed, "init")`` and ``rng(seed, "shuffle", epoch)`` never share a
    stream, and each is reproducible on its own.
    """
    key = [zlib.crc32(str(s).encode()) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed & (2**64 - 1), spawn_key=key)))


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
         stride=1, padding=0, groups: int = 1) -> torch.Tensor:
    """N-d cross-correlation, N inferred from the kernel rank.

    ``x`` is (batch, C_in, *spatial) and ``kernel`` is
    (C_out, C_in / groups, *k).
    """
    dims = kernel.dim() - 2
    if dims not in _CONV:
        raise ValueError(f"kernel rank {kernel.dim()} does not describe a 1/2/3-D convolution")
    if x.dim() != dims + 2:
        raise ValueError(f"input rank {x.dim()} does not match a {dims}-D kernel")
    if x.shape[1] != kernel.shape[1] * groups:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1] * groups}")
    stride = _per_dim(stride, dims)
    padding = _per_dim(padding, dims)
    for d in range(dims):
        out = conv_output_size(x.shape[2 + d], kernel.shape[2 + d], stride[d], padding[d])
        if out < 1:
            raise ValueError(f"non-positive output extent {out} along spatial dim {d}")
    return _CONV[dims](x, kernel, bias, stride=stride, padding=padding, groups=groups)


def _per_dim(v, dims):
    if isinstance(v, int):
        return (v,) * dims
    v = tuple(v)
    if len(v) != dims:
        raise ValueError(f"expected {dims} values, got {v}")
    return v


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map over the last axis; ``weight`` is (D_out, D_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.logsumexp(shifted, dim=dim, keepdim=True)


class FrameNorm(nn.GroupNorm):
    """Normalization over channels (and space) of one frame of one sample.

    Statistics never mix samples or frames, which keeps every encoder
    output independent of what else is in the batch.
    """

    def __init__(self, channels: int, groups: int = 1):
        super().__init__(math.gcd(groups, channels), channels)


class BiRNN(nn.Module):
    """Length-aware stacked bidirectional GRU or LSTM.

    Input (bs, T, D) plus true lengths; the backward direction of each
    sequence starts at its last real frame and outputs past the true length
    are zero.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 2,
                 cell: str = "gru", bidirectional: bool = True):
        super().__init__()
        cls = {"gru": nn.GRU, "lstm": nn.LSTM}[cell]
        self.rnn = cls(input_size, hidden_size, num_layers=num_layers,
                       batch_first=True, bidirectional=bidirectional)
        self.output_size = hidden_size * (2 if bidirectional else 1)

    def forward(self, x: torch.Tensor, lengths) -> torch.Tensor:
        lengths = torch.as_tensor(lengths, dtype=torch.int64).cpu()
        if int(lengths.max()) > x.shape[1]:
            raise ValueError(f"sequence length {int(lengths.max())} exceeds input extent {x.shape[1]}")
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


def bigru(x: torch.Tensor, lengths, module: BiRNN) -> torch.Tensor:
    return module(x, lengths)


def init_parameters(module: nn.Module, seed: int, stream: str = "init") -> None:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    Normalization scales start at one. Values come from numpy so the same
    seed gives the same parameters whatever torch build is installed.
    """
    gen = rng(seed, stream)
    norm_types = (nn.GroupNorm, nn.LayerNorm)
    norm_params = {id(p) for m in module.modules() if isinstance(m, norm_types)
                   for p in m.parameters(recurse=False)}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if id(p) in norm_params:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "bias" in name or p.dim() < 2:
                p.zero_()
            else:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                vals = gen.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals).to(p.dtype))


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> relative error
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        return "\n".join(lines + [f"max {self.max_error:.3e} (tol {self.tol:.0e})"])


def grad_check(f: Callable[[], torch.Tensor], params: Iterable[tuple[str, torch.Tensor]],
               eps: float = 1e-5, tol: float = 1e-4, max_entries: int | None = 24,
               seed: int = 0, analytic: dict | None = None) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` are (name, leaf tensor) pairs that ``f`` closes over. At most
    ``max_entries`` randomly chosen entries per tensor are probed. The error
    per parameter is ||g_a - g_n|| / max(||g_a||, ||g_n||) over the probed
    entries. ``analytic`` overrides the autograd gradient (for testing the
    checker itself).
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    value = f()
    if not torch.isfinite(value):
        raise ValueError(f"function value is not finite: {value.item()}")
    grads = torch.autograd.grad(value, [p for _, p in params], allow_unused=True)
    gen = rng(seed, "grad_check")
    errors = {}
    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if analytic is not None and name in analytic:
            g = analytic[name]
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else \
            np.sort(gen.choice(n, size=max_entries, replace=False))
        num = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ValueError(f"non-finite function value perturbing {name}[{i}]")
                num[j] = (fp - fm) / (2 * eps)
        ana = g.detach().reshape(-1)[torch.from_numpy(idx)].double().numpy()
        denom = max(np.linalg.norm(ana), np.linalg.norm(num))
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(ana - num) / denom)
    return GradCheckReport(errors, tol)
