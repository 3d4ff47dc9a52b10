"""Run configuration: an INI file plus ``section.key=value`` overrides.

Grammar (``configparser`` with interpolation disabled)::

    [section]
    key = value        ; full-line comments start with '#' or ';'

Sections and keys are fixed by the dataclasses below; anything else is an
error. Tuples are written comma-separated, booleans as true/false.
"""
from __future__ import annotations

import configparser
import io
import math
import typing
from dataclasses import dataclass, field, fields

from .distill import DistillConfig
from .evalbench import DetectorParams
from .geometry import AugmentConfig
from .network import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_train: int = 200
    n_eval: int = 100
    size: int = 64
    style: str = "multi_freq_noise"
    density: float = 1.0
    contrast: float = 1.0
    grid_stride: int = 4


@dataclass
class ModelSection:
    n_rotations: int = 4
    trunk_channels: tuple[int, ...] = (16, 16)
    head_channels: int = 32
    desc_dim: int = 32
    rate: int = 4
    kernel_size: int = 3


@dataclass
class AugmentSection:
    rotation_deg: tuple[float, float] = (0.0, 360.0)
    scale: tuple[float, float] = (0.8, 1.25)
    shear: float = 0.2
    perspective: float = 1e-4
    translation: float = 0.05


@dataclass
class TrainSection:
    iterations: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    min_correspondences: int = 8


@dataclass
class DistillSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    iterations: int = 500
    lr: float = 0.001
    momentum: float = 0.9
    teacher_rotations: int = 4


@dataclass
class EvalSection:
    nms_radius: int = 2
    threshold: float = 0.0
    top_k: int = 256
    border: int = 4
    sweep_step_deg: float = 15.0
    sweep_images: int = 25
    timing_sizes: tuple[int, ...] = (64, 256)
    timing_repetitions: int = 15


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = False
    log_every: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # -- derived objects ----------------------------------------------------
    def model_config(self, variant: str) -> ModelConfig:
        m = self.model
        return ModelConfig(variant=variant, n_rotations=m.n_rotations, trunk_channels=m.trunk_channels,
                           head_channels=m.head_channels, desc_dim=m.desc_dim, rate=m.rate, kernel_size=m.kernel_size)

    def augment_config(self) -> AugmentConfig:
        a = self.augment
        cfg = AugmentConfig(rotation=tuple(math.radians(v) for v in a.rotation_deg), scale=a.scale,
                            shear=a.shear, perspective=a.perspective, translation=a.translation)
        cfg.validate()
        return cfg

    def detector(self) -> DetectorParams:
        e = self.eval
        return DetectorParams(e.nms_radius, e.threshold, e.top_k, e.border)

    def distill_config(self, student: str) -> DistillConfig:
        d = self.distill
        cfg = DistillConfig(d.lambda1, d.lambda2, d.iterations, d.lr, d.momentum, self.run.seed, student)
        cfg.validate()
        return cfg

    # -- text form -------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, typ, where: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typing.get_origin(typ) is tuple:
            args = typing.get_args(typ)
            items = [s for s in (p.strip() for p in text.split(",")) if s]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(args[0](s) for s in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(t(s) for t, s in zip(args, items))
        return typ(text)
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {text!r} ({e})") from None


def _apply(cfg: RunConfig, section: str, key: str, value: str):
    if section not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(obj, key, _parse(value, hints[key], f"{section}.{key}"))


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if given), then overrides."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in cp.sections():
            for key, value in cp[section].items():
                _apply(cfg, section, key, value)
    for item in overrides or []:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _apply(cfg, section, key.strip(), value)
    return cfg
