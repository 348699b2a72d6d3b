"""INI configuration: ``[grid]``, ``[model]``, ``[train]``, ``[augment]``, ``[loss]`` and ``[gt]``."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .dataset_io import NUM_CLASSES
from .errors import ConfigError, InvalidGridSpec
from .grid import GridSpec, default_spec
from .groundtruth import NeighborConfig
from .model import ModelConfig
from .trainer import AugmentConfig, TrainConfig

_KEYS = {
    "grid": {"x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "cell_xy", "cell_z"},
    "model": {"C", "Q", "occupancy_mode", "unet_depth", "base_channels", "P", "N", "pad", "bn_momentum"},
    "train": {"mode", "epochs", "batch_size", "lr", "weight_decay", "seed", "max_steps", "shuffle"},
    "augment": {
        "flip", "rotate", "scale", "translate", "seed", "flip_prob",
        "max_angle_deg", "scale_min", "scale_max", "translate_std",
    },
    "loss": {"weights"},
    "gt": {"weights", "d", "max_scans", "metric"},
}


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    neighbors: NeighborConfig = field(default_factory=NeighborConfig)

    @property
    def grid(self) -> GridSpec:
        return self.model.grid


def _floats(text: str, n: Optional[int], what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} values, got {len(vals)}")
    return vals


def parse_config(text: str) -> Config:
    """Parse INI text; missing keys keep their defaults, unknown keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    def conv(section, key, fn, default):
        s = sec(section)
        if key not in s:
            return default
        raw = s[key].strip()
        try:
            if fn is bool:
                return cp.getboolean(section, key)
            return fn(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None

    g = default_spec().to_dict()
    for key in _KEYS["grid"]:
        g[key] = conv("grid", key, float, g[key])
    try:
        grid = GridSpec.from_dict(g)
    except InvalidGridSpec as exc:
        raise ConfigError(f"[grid] {exc}") from None

    m = ModelConfig.__dataclass_fields__
    mkw = {}
    for key, fn in (("C", int), ("Q", int), ("occupancy_mode", str), ("unet_depth", int), ("base_channels", int),
                    ("P", int), ("N", int), ("pad", bool), ("bn_momentum", float)):
        mkw[key] = conv("model", key, fn, m[key].default)

    a = AugmentConfig()
    std = sec("augment").get("translate_std")
    akw = dict(
        flip=conv("augment", "flip", bool, a.flip),
        rotate=conv("augment", "rotate", bool, a.rotate),
        scale=conv("augment", "scale", bool, a.scale),
        translate=conv("augment", "translate", bool, a.translate),
        seed=conv("augment", "seed", int, a.seed),
        flip_prob=conv("augment", "flip_prob", float, a.flip_prob),
        max_angle=math.radians(conv("augment", "max_angle_deg", float, math.degrees(a.max_angle))),
        scale_range=(conv("augment", "scale_min", float, a.scale_range[0]), conv("augment", "scale_max", float, a.scale_range[1])),
        translate_std=a.translate_std if std is None else _floats(std, 3, "[augment] translate_std"),
    )

    t = TrainConfig()
    lw = sec("loss").get("weights")
    gw = sec("gt").get("weights")
    max_steps = sec("train").get("max_steps")
    n = NeighborConfig()
    try:
        model = ModelConfig(grid=grid, **mkw)
        train = TrainConfig(
            mode=conv("train", "mode", str, t.mode),
            epochs=conv("train", "epochs", int, t.epochs),
            batch_size=conv("train", "batch_size", int, t.batch_size),
            lr=conv("train", "lr", float, t.lr),
            weight_decay=conv("train", "weight_decay", float, t.weight_decay),
            seed=conv("train", "seed", int, t.seed),
            max_steps=None if max_steps in (None, "", "none") else conv("train", "max_steps", int, None),
            shuffle=conv("train", "shuffle", bool, t.shuffle),
            augment=AugmentConfig(**akw),
            loss_weights=None if lw is None else _floats(lw, NUM_CLASSES, "[loss] weights"),
            gt_weights=None if gw is None else _floats(gw, NUM_CLASSES, "[gt] weights"),
        )
        train.resolved_loss_weights()
        neighbors = NeighborConfig(
            d=conv("gt", "d", float, n.d),
            max_scans=conv("gt", "max_scans", int, n.max_scans),
            metric=conv("gt", "metric", str, n.metric),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Config(model, train, neighbors)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    return parse_config(text)


def format_config(cfg: Config) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    m, t, a, n = cfg.model, cfg.train, cfg.train.augment, cfg.neighbors

    def nums(vals):
        return ", ".join(repr(float(v)) for v in vals)

    lines = ["[grid]"]
    lines += [f"{k} = {v!r}" for k, v in m.grid.to_dict().items()]
    lines += ["", "[model]"]
    for key in ("C", "Q", "occupancy_mode", "unet_depth", "base_channels", "P", "N", "pad", "bn_momentum"):
        v = getattr(m, key)
        lines.append(f"{key} = {v if isinstance(v, str) else repr(v)}")
    lines += ["", "[train]"]
    for key in ("mode", "epochs", "batch_size", "lr", "weight_decay", "seed", "shuffle"):
        v = getattr(t, key)
        lines.append(f"{key} = {v if isinstance(v, str) else repr(v)}")
    lines.append(f"max_steps = {'none' if t.max_steps is None else t.max_steps}")
    lines += ["", "[augment]"]
    for key in ("flip", "rotate", "scale", "translate", "seed", "flip_prob"):
        lines.append(f"{key} = {getattr(a, key)!r}")
    lines.append(f"max_angle_deg = {math.degrees(a.max_angle)!r}")
    lines.append(f"scale_min = {a.scale_range[0]!r}")
    lines.append(f"scale_max = {a.scale_range[1]!r}")
    lines.append(f"translate_std = {nums(a.translate_std)}")
    lines += ["", "[loss]"]
    if t.loss_weights is not None:
        lines.append(f"weights = {nums(t.loss_weights)}")
    lines += ["", "[gt]"]
    if t.gt_weights is not None:
        lines.append(f"weights = {nums(t.gt_weights)}")
    lines += [f"d = {n.d!r}", f"max_scans = {n.max_scans}", f"metric = {n.metric}"]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: Config, **train_overrides) -> Config:
    return replace(cfg, train=replace(cfg.train, **train_overrides))
