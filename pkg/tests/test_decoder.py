import itertools
import math

import numpy as np
import pytest
import torch

from fingerspell.decoder import (DecoderHead, beam_decode, collapse, ctc_batch_loss, ctc_batch_losses, ctc_loss,
                                 ctc_loss_bruteforce, ctc_path_probability_bruteforce, decode_head,
                                 greedy_decode, min_frames)
from fingerspell.errors import ConfigError, CTCInfeasibleError
from fingerspell.numerics import init_parameters


def random_lp(gen, t, v):
    x = gen.normal(size=(t, v)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def test_collapse():
    assert collapse([1, 1, 0, 1, 2, 2, 0]) == (1, 1, 2)
    assert collapse([0, 0]) == ()


def test_min_frames():
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1, 2, 2]) == 6
    assert min_frames([]) == 0


def test_uniform_two_frames_one_letter():
    # paths for "a" over 2 frames with {blank, a}: aa, a-, -a  -> 3/4
    lp = np.log(np.full((2, 2), 0.5))
    assert math.exp(-ctc_loss(lp, [1], with_grad=False)) == pytest.approx(0.75, abs=1e-15)


def test_matches_bruteforce_small():
    gen = np.random.default_rng(0)
    for _ in range(50):
        t, v = int(gen.integers(1, 5)), int(gen.integers(2, 4))
        label = tuple(int(x) for x in gen.integers(1, v, size=gen.integers(0, 3)))
        lp = random_lp(gen, t, v)
        brute = ctc_path_probability_bruteforce(lp, label)
        if t < min_frames(label):
            assert brute == 0.0
            assert ctc_loss_bruteforce(lp, label) == math.inf
            continue
        assert math.exp(-ctc_loss(lp, label, with_grad=False)) == pytest.approx(brute, abs=1e-12)


def test_infeasible_raises():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(lp, [1, 1])


def test_gradient_matches_finite_differences():
    gen = np.random.default_rng(1)
    lp = gen.normal(size=(5, 4))
    label = [1, 2, 2]
    _, grad = ctc_loss(lp, label)
    eps = 1e-6
    num = np.zeros_like(lp)
    for idx in np.ndindex(*lp.shape):
        a, b = lp.copy(), lp.copy()
        a[idx] += eps
        b[idx] -= eps
        num[idx] = (ctc_loss(a, label, with_grad=False) - ctc_loss(b, label, with_grad=False)) / (2 * eps)
    assert np.allclose(grad, num, atol=1e-7)


def test_batch_loss_autograd_ignores_padding():
    gen = np.random.default_rng(2)
    x = torch.tensor(gen.normal(size=(2, 6, 3)), requires_grad=True)
    lp = torch.log_softmax(x, -1)
    losses = ctc_batch_losses(lp, [(1,), (2, 1)], [3, 6])
    assert losses[0].item() == pytest.approx(ctc_loss(lp[0, :3].detach().numpy(), [1], with_grad=False))
    ctc_batch_loss(lp, [(1,), (2, 1)], [3, 6]).backward()
    assert torch.all(x.grad[0, 3:] == 0)
    assert torch.any(x.grad[1] != 0)


def test_greedy_decode():
    lp = np.log(np.array([[0.1, 0.9, 0], [0.1, 0.9, 0], [0.9, 0.1, 0], [0.1, 0.9, 0], [0.2, 0.2, 0.6]]) + 1e-12)
    assert greedy_decode(lp).indices == (1, 1, 2)
    assert greedy_decode(np.zeros((3, 2)) + np.array([0.0, -5.0])).indices == ()


def test_beam_width_one_can_differ_from_greedy_but_wide_beam_is_exact():
    gen = np.random.default_rng(3)
    for _ in range(30):
        t, v = int(gen.integers(1, 5)), 3
        lp = random_lp(gen, t, v)
        scores = {}
        for path in itertools.product(range(v), repeat=t):
            key = collapse(path)
            scores[key] = scores.get(key, 0.0) + math.exp(sum(lp[i, k] for i, k in enumerate(path)))
        best = max(scores.values())
        got = beam_decode(lp, width=64).indices
        assert scores[got] == pytest.approx(best, rel=1e-9)


def test_beam_validation():
    with pytest.raises(ValueError):
        beam_decode(np.zeros((2, 3)), 0)


def test_decoder_head_shapes_and_modes():
    feats = torch.randn(2, 5, 8, dtype=torch.float64)
    for rnn in ("gru", "lstm", "none"):
        head = DecoderHead(8, 4, rnn=rnn, hidden=6).double()
        init_parameters(head, 0)
        lp = head(feats, [5, 3])
        assert tuple(lp.shape) == (2, 5, 4)
        assert torch.allclose(lp.exp().sum(-1), torch.ones(2, 5, dtype=torch.float64))
    assert tuple(decode_head(feats[0], head).shape) == (5, 4)
    with pytest.raises(ConfigError):
        DecoderHead(8, 4, rnn="tcn")
    with pytest.raises(ValueError):
        head(torch.zeros(1, 2, 7, dtype=torch.float64), [2])
