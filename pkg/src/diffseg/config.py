"""Experiment configuration and its flat ``key = value`` text format.

Sections are dotted prefixes (``unet.channels = 8, 16``). Unknown keys are
errors. ``dumps(loads(text))`` is canonical, and the config hash is taken
over that canonical text.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .diffusion import MODES, PREDICT_X0
from .losses import LossConfig
from .optim import OptimConfig
from .unet import UNetConfig

TRAIN_MODES = ("subsequence", "full")
MODELS = ("diffusion", "baseline")
# mirrored from a top-level key, never written or read on its own
_DERIVED = {"loss.parameterization"}


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    K: int = 5


@dataclass
class RecycleConfig:
    enabled: bool = True
    prob: float = 1.0
    exclude_last: bool = False


@dataclass
class ExperimentConfig:
    model: str = "diffusion"
    parameterization: str = PREDICT_X0
    train_steps_mode: str = "subsequence"
    seed: int = 0
    eval_seed: int = 1234
    steps: int = 2000
    batch_size: int = 2
    checkpoint_every: int = 500
    augment: bool = True
    recycle: RecycleConfig = field(default_factory=RecycleConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=2e-3))
    unet: UNetConfig = field(default_factory=UNetConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.parameterization not in MODES:
            raise ValueError(f"parameterization must be one of {MODES}")
        if self.train_steps_mode not in TRAIN_MODES:
            raise ValueError(f"train_steps_mode must be one of {TRAIN_MODES}")
        if self.steps < 2 or self.batch_size < 1:
            raise ValueError("steps must be >= 2 and batch_size >= 1")
        # the parameterization is stated once at top level and mirrored into the loss
        self.loss.parameterization = self.parameterization
        if self.unet.num_classes != self.data.num_classes:
            raise ValueError(
                f"unet.num_classes={self.unet.num_classes} != data.num_classes={self.data.num_classes}")
        self.unet.check_spatial(self.data.shape)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.optim.warmup_fraction * self.steps))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        inner = args[0]
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        if args[-1] is not Ellipsis and len(items) != len(args):
            raise ValueError(f"{key}: expected {len(args)} comma-separated values, got {len(items)}")
        return tuple(_parse(s, inner, key) for s in items)
    if tp is bool:
        if text.lower() in ("true", "on", "yes", "1"):
            return True
        if text.lower() in ("false", "off", "no", "0"):
            return False
        raise ValueError(f"{key}: not a boolean: {text!r}")
    try:
        return tp(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def _items(obj, prefix=""):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        value = getattr(obj, f.name)
        key = prefix + f.name
        if key in _DERIVED:
            continue
        if dataclasses.is_dataclass(value):
            yield from _items(value, key + ".")
        else:
            yield key, value, hints[f.name]


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v, _ in _items(cfg))


def loads(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return from_dict(values)


def from_dict(values: dict[str, str]) -> ExperimentConfig:
    known = {k: tp for k, _, tp in _items(ExperimentConfig())}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return _build(ExperimentConfig(), "", {k: _parse(v, known[k], k) for k, v in values.items()})


def _build(default, prefix, parsed):
    kwargs = {}
    for f in dataclasses.fields(default):
        if not f.init:
            continue
        key = prefix + f.name
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            kwargs[f.name] = _build(value, key + ".", parsed)
        elif key in parsed:
            kwargs[f.name] = parsed[key]
    return dataclasses.replace(default, **kwargs)


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted keys replaced, e.g. ``{"recycle.enabled": False}``."""
    values = {k: _format(v) for k, v, _ in _items(cfg)}
    values.update({k: _format(v) for k, v in overrides.items()})
    return from_dict(values)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()[:16]


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
