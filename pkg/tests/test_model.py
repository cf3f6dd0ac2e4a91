import numpy as np
import pytest
import torch

from fingerspell.datamodel import LabelSequence
from fingerspell.errors import ConfigError, DataError
from fingerspell.model import ModelConfig, assemble, collate, count_parameters, fuse
from fingerspell.preprocessing import Sample
from fingerspell.tpe import TpeConfig
from fingerspell.tsam import TsamConfig

from .conftest import random_frame_clip, random_kp_clip


def samples(lengths, seed=0, rgb=True, kp=True, size=16):
    gen = np.random.default_rng(seed)
    return [Sample(LabelSequence((1,)), random_kp_clip(gen, n) if kp else None,
                   random_frame_clip(gen, n, size) if rgb else None, f"s{i}") for i, n in enumerate(lengths)]


def small_cfg(modality, **kw):
    base = dict(tsam=TsamConfig.tiny(input_size=16, feature_dim=16), tpe=TpeConfig(feature_dim=16), hidden=8)
    return ModelConfig(modality=modality, **{**base, **kw})


def test_fuse_modes():
    a = torch.randn(3, 4)
    b = torch.randn(3, 4)
    assert torch.equal(fuse(a, torch.zeros(3, 4)), a)
    assert fuse(a, b, "concat").shape == (3, 8)
    assert torch.equal(fuse(a, b, "weighted", (1.0, 0.0)), a)
    assert torch.equal(fuse(a, b, "product"), a * b)
    with pytest.raises(DataError):
        fuse(a, torch.randn(2, 4))


@pytest.mark.parametrize("modality", ["rgb", "kp", "rgb+kp"])
def test_forward_shapes(modality):
    cfg = small_cfg(modality)
    model = assemble(cfg, seed=0)
    inp = collate(samples([3, 5]), cfg)
    lp = model(inp)
    assert tuple(lp.shape) == (2, 5, 7)
    assert torch.allclose(lp.exp().sum(-1), torch.ones(2, 5), atol=1e-5)


def test_concat_doubles_head_width():
    model = assemble(small_cfg("rgb+kp", fusion="concat"))
    assert model.head.in_dim == 32
    assert tuple(model(collate(samples([2]), model.cfg)).shape) == (1, 2, 7)


def test_rnn_none_and_conv_modules():
    model = assemble(small_cfg("kp", rnn="none", tpe=TpeConfig(feature_dim=16, conv_modules=2)))
    assert model.head.rnn is None and len(model.necks) == 2
    assert tuple(model(collate(samples([4], rgb=False), model.cfg)).shape) == (1, 4, 7)


def test_keypoint_group_selection():
    model = assemble(small_cfg("kp", keypoint_groups=("right_hand",)))
    assert model.tpe.cfg.num_keypoints == 21
    assert tuple(model(collate(samples([3], rgb=False), model.cfg)).shape) == (1, 3, 7)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(modality="audio")
    with pytest.raises(ConfigError):
        ModelConfig(modality="rgb+kp", tsam=TsamConfig(feature_dim=16), tpe=TpeConfig(feature_dim=32))
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(keypoint_groups=("face",))


def test_collate_errors():
    cfg = small_cfg("rgb+kp")
    with pytest.raises(DataError):
        collate([], cfg)
    with pytest.raises(DataError, match="s0"):
        collate(samples([3], rgb=False), cfg)
    s = samples([3])[0]
    bad = Sample(s.label, s.keypoints, random_frame_clip(np.random.default_rng(1), 4, 16), "odd")
    with pytest.raises(DataError, match="odd"):
        collate([bad], cfg)


def test_assemble_is_seeded():
    a, b = assemble(small_cfg("kp"), seed=3), assemble(small_cfg("kp"), seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert count_parameters(a) > 0
    c = assemble(small_cfg("kp"), seed=4)
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_batch_independence_of_predictions():
    cfg = small_cfg("rgb+kp")
    model = assemble(cfg, seed=1).eval()
    ss = samples([2, 6, 4], seed=5)
    together = model(collate(ss, cfg))
    for i, s in enumerate(ss):
        alone = model(collate([s], cfg))[0]
        assert torch.allclose(together[i, :s.length], alone, atol=1e-5)
