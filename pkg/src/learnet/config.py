"""Strict JSON run configuration.

Sections: ``network``, ``train``, ``data``, ``eval`` and ``track``. Unknown keys
are errors, and every shape is chain-checked at load time. ``LEARNET_SEED``
overrides all seeds when set.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

from learnet.autodiff import ShapeError
from learnet.networks import NetworkSpec, SpecError, score_map_size
from learnet.training import TrainConfig

SEED_ENV = "LEARNET_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _strict(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    kind: str = "glyphs"              # glyphs | tracking
    source: str = "synthetic"         # synthetic | path
    path: Optional[str] = None
    seed: int = 0
    n_background: int = 30
    n_eval: int = 20
    chars_per_alphabet: int = 12
    instances_per_char: int = 20
    n_sequences: int = 100
    sequence_length: int = 50
    frame_size: int = 96
    object_size: int = 16
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("glyphs", "tracking"):
            raise ValueError("kind must be 'glyphs' or 'tracking'")
        if self.source not in ("synthetic", "path"):
            raise ValueError("source must be 'synthetic' or 'path'")
        if self.source == "path" and not self.path:
            raise ValueError("source 'path' needs a path")
        if min(self.n_background, self.n_eval, self.chars_per_alphabet) < 1:
            raise ValueError("alphabet and character counts must be >= 1")
        if self.instances_per_char < 2:
            raise ValueError("instances_per_char must be >= 2")
        if self.n_sequences < 1 or self.sequence_length < 1:
            raise ValueError("n_sequences and sequence_length must be >= 1")
        if not 0 < self.object_size <= self.frame_size:
            raise ValueError("object_size must be positive and fit in frame_size")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    n_problems: int = 2000
    seed: int = 0
    way: int = 20

    def __post_init__(self):
        if self.n_problems < 1:
            raise ValueError("n_problems must be >= 1")
        if self.way < 2:
            raise ValueError("way must be >= 2")


@dataclass(frozen=True)
class TrackConfig:
    search_radius: Optional[float] = None
    exemplar_size: int = 32
    search_size: int = 64
    n_sequences: int = 20
    sequence_length: int = 50
    seed: int = 1

    def __post_init__(self):
        if self.search_radius is not None and self.search_radius <= 0:
            raise ValueError("search_radius must be positive")
        if not 0 < self.exemplar_size <= self.search_size:
            raise ValueError("need 0 < exemplar_size <= search_size")
        if self.n_sequences < 1 or self.sequence_length < 2:
            raise ValueError("need n_sequences >= 1 and sequence_length >= 2")


@dataclass(frozen=True)
class Config:
    network: Optional[NetworkSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    track: TrackConfig = field(default_factory=TrackConfig)

    def map_size(self) -> int:
        return score_map_size(self.network, self.track.search_size)


def parse_config(doc: Mapping, env: Optional[Mapping] = None) -> Config:
    if not isinstance(doc, Mapping):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(doc) - {"network", "train", "data", "eval", "track"})
    if unknown:
        raise ConfigError(f"config: unknown section(s) {unknown}")
    network = None
    if doc.get("network") is not None:
        try:
            network = NetworkSpec.from_dict(doc["network"])
        except (SpecError, ShapeError, ValueError, TypeError) as exc:
            raise ConfigError(f"network: {exc}") from None
    data = _strict(DataConfig, doc.get("data"), "data")
    train_doc = doc.get("train")
    if train_doc is not None and not isinstance(train_doc, Mapping):
        raise ConfigError("train: expected an object")
    train_doc = dict(train_doc or {})
    if data.kind == "tracking":
        train_doc.setdefault("positive_fraction", 0.75)
    train = _strict(TrainConfig, train_doc, "train")
    cfg = Config(network, train, data, _strict(EvalConfig, doc.get("eval"), "eval"),
                 _strict(TrackConfig, doc.get("track"), "track"))

    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = replace(cfg, train=replace(cfg.train, seed=seed), data=replace(cfg.data, seed=seed),
                      eval=replace(cfg.eval, seed=seed), track=replace(cfg.track, seed=seed))
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: Config):
    spec = cfg.network
    if spec is None:
        return
    if cfg.data.kind == "glyphs":
        if spec.input_shape != (28, 28, 1):
            raise ConfigError(f"network.input_shape must be [28, 28, 1] for glyph data, got {list(spec.input_shape)}")
        return
    size = cfg.track.exemplar_size
    if spec.input_shape != (size, size, 1):
        raise ConfigError(f"network.input_shape must be [{size}, {size}, 1] to match track.exemplar_size")
    if spec.comparison != "dot" or spec.architecture == "single-stream-learnet":
        raise ConfigError("tracking needs a two-stream network with the dot comparison")
    try:
        cfg.map_size()
    except (SpecError, ShapeError) as exc:
        raise ConfigError(f"track: {exc}") from None


def load_config(path, env: Optional[Mapping] = None) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, env)
