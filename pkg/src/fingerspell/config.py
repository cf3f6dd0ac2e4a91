"""Run configuration: dataclasses, flat ``key = value`` files and presets.

A config file holds one ``section.key = value`` pair per line; ``#`` and
``;`` start comments. Values are Python literals (numbers, tuples,
``true``/``false``) or bare strings. Recognised sections are ``model``,
``tsam``, ``tpe``, ``decoder``, ``train``, ``augment``, ``input`` and
``synth``.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .preprocessing import AugmentSpec
from .synthgen import SynthConfig
from .tpe import TpeConfig
from .tsam import TsamConfig

OPTIMIZERS = ("adamw",)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    gamma: float = 0.1
    milestones: tuple = (20, 40)
    epochs: int = 60
    batch_clips: int = 4
    seed: int = 0
    grad_clip: float = 0.0
    augment: bool = True
    length_bucketing: bool = False
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"train.milestones must be strictly increasing, got {self.milestones}")
        if self.epochs < 0 or self.batch_clips < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_clips >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based): lr * gamma^#{milestones <= epoch}."""
        return self.lr * self.gamma ** sum(1 for m in self.milestones if m <= epoch)


def train_preset(modality: str) -> TrainConfig:
    """Full-scale schedule per modality."""
    if modality == "kp":
        return TrainConfig(milestones=(25, 40), epochs=100)
    if modality == "rgb+kp":
        return TrainConfig(milestones=(20, 40), epochs=100)
    return TrainConfig(milestones=(20, 40), epochs=60)


def full_preset(modality: str) -> tuple[ModelConfig, TrainConfig]:
    """ResNet-34 RGB layout at 224 px, 512-dim features, full schedule."""
    model = ModelConfig(modality=modality, tsam=TsamConfig.resnet34(), tpe=TpeConfig.full())
    return model, train_preset(modality)


def desk_preset(modality: str) -> tuple[ModelConfig, TrainConfig]:
    """Small model and short schedule that converge on synthetic data on a CPU."""
    model = ModelConfig(modality=modality, tsam=TsamConfig.tiny(feature_dim=128),
                        tpe=TpeConfig(feature_dim=128), hidden=96)
    epochs = 30 if modality == "kp" else 40
    train = TrainConfig(lr=2e-3, milestones=(int(epochs * 0.7),), epochs=epochs, weight_decay=1e-4,
                        grad_clip=1.0)
    return model, train


def parse_config_text(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    raw = {}
    for key, value in parser.items("root"):
        if "." not in key:
            raise ConfigError(f"{source}: key {key!r} has no section prefix")
        raw[key.strip()] = _parse_value(value.strip())
    return raw


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    if isinstance(value, list):
        value = tuple(value)
    return value


def _coerce(cls, name, value):
    kinds = {f.name: f.type for f in fields(cls)}
    if name not in kinds:
        raise ConfigError(f"unknown key {name!r} for {cls.__name__}")
    kind = kinds[name]
    if kind == "tuple" and not isinstance(value, tuple):
        value = tuple(v.strip() for v in value.split(",")) if isinstance(value, str) else (value,)
    if kind == "str" and not isinstance(value, str):
        value = str(value)
    if kind == "float" and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{cls.__name__}.{name} must be true or false, got {value!r}")
    if kind == "int" and not isinstance(value, int):
        raise ConfigError(f"{cls.__name__}.{name} must be an integer, got {value!r}")
    return value


def _apply(obj, updates: dict):
    try:
        return replace(obj, **{k: _coerce(type(obj), k, v) for k, v in updates.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def build_configs(raw: dict, base: tuple | None = None):
    """Turn parsed key/value pairs into (ModelConfig, TrainConfig, AugmentSpec).

    ``base`` gives starting configs; otherwise the full-scale defaults for
    the configured modality are used.
    """
    sections: dict[str, dict] = {}
    for key, value in raw.items():
        section, _, name = key.partition(".")
        sections.setdefault(section, {})[name] = value
    unknown = set(sections) - {"model", "tsam", "tpe", "decoder", "train", "augment", "input", "synth"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model_keys = dict(sections.get("model", {}))
    modality = model_keys.get("modality", base[0].modality if base else "kp")
    if base is None:
        model, train, aug = ModelConfig(modality=modality), train_preset(modality), AugmentSpec()
    else:
        model, train, aug = base

    tsam_keys = dict(sections.get("tsam", {}))
    tpe_keys = dict(sections.get("tpe", {}))
    if "feature_dim" in model_keys:
        f = model_keys.pop("feature_dim")
        tsam_keys.setdefault("feature_dim", f)
        tpe_keys.setdefault("feature_dim", f)
    inputs = sections.get("input", {})
    if "size" in inputs:
        tsam_keys.setdefault("input_size", inputs["size"])
    for name in ("mean", "std"):
        if name in inputs:
            model_keys[f"frame_{name}"] = inputs[name]
    extra = set(inputs) - {"size", "mean", "std"}
    if extra:
        raise ConfigError(f"unknown input keys: {sorted(extra)}")
    for name, value in sections.get("decoder", {}).items():
        if name not in ("rnn", "hidden", "layers"):
            raise ConfigError(f"unknown decoder key {name!r}")
        model_keys[name] = value
    if "model.keypoint_groups" in raw and isinstance(model_keys.get("keypoint_groups"), str):
        model_keys["keypoint_groups"] = tuple(g.strip() for g in model_keys["keypoint_groups"].split(","))

    tsam = _apply(model.tsam, tsam_keys)
    tpe = _apply(model.tpe, tpe_keys)
    model = _apply(replace(model, tsam=tsam, tpe=tpe), model_keys)
    train = _apply(train, sections.get("train", {}))
    aug = _apply(aug, sections.get("augment", {}))
    return model, train, aug


def build_synth_config(raw: dict, base: SynthConfig | None = None) -> SynthConfig:
    keys = {k.partition(".")[2]: v for k, v in raw.items() if k.startswith("synth.")}
    return _apply(base or SynthConfig(), keys)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    tsam = TsamConfig(**_tuples(d.pop("tsam")))
    tpe = TpeConfig(**_tuples(d.pop("tpe")))
    return ModelConfig(tsam=tsam, tpe=tpe, **_tuples(d))


def dataclass_from_dict(cls, d: dict):
    return cls(**_tuples(d))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def dump_config(model: ModelConfig, train: TrainConfig, aug: AugmentSpec) -> str:
    """Canonical flat text for a full run configuration."""
    lines = []
    for key, value in asdict(model).items():
        if key in ("tsam", "tpe"):
            lines += [f"{key}.{k} = {_fmt(v)}" for k, v in value.items()]
        elif key in ("rnn", "hidden", "layers"):
            lines.append(f"decoder.{key} = {_fmt(value)}")
        elif key in ("frame_mean", "frame_std"):
            lines.append(f"input.{key[6:]} = {_fmt(value)}")
        else:
            lines.append(f"model.{key} = {_fmt(value)}")
    lines += [f"train.{k} = {_fmt(v)}" for k, v in asdict(train).items()]
    lines += [f"augment.{k} = {_fmt(v)}" for k, v in asdict(aug).items()]
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "(" + ", ".join(_fmt(v) if not isinstance(v, str) else repr(v) for v in value) + \
            ("," if len(value) == 1 else "") + ")"
    return str(value)
