"""Flat ``key = value`` run configuration with namespaced keys.

Example file::

    # toy run
    model.C = 32
    train.lambda = 1e-3
    drop.strategy = feature_only

Every key can also be given on the command line as ``--key=value``.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

from .codec import LossWeights, ModelConfig
from .train import STRATEGIES, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _stages(v) -> tuple:
    return tuple(str(Fraction(s.strip())) for s in str(v).split(",")) if isinstance(v, str) else tuple(v)


def _paths(v) -> tuple:
    return tuple(p.strip() for p in str(v).split(",") if p.strip()) if isinstance(v, str) else tuple(v)


# key -> (section, attribute, parser)
KEYS = {
    "data.count": ("data", "count", int),
    "data.points": ("data", "points", int),
    "data.seed": ("data", "seed", int),
    "data.test_count": ("data", "test_count", int),
    "data.paths": ("data", "paths", _paths),
    "data.normalize": ("data", "normalize", _bool),
    "model.C": ("model", "C", int),
    "model.C_xyz": ("model", "C_xyz", int),
    "model.stages": ("model", "stages", _stages),
    "model.k": ("model", "k", int),
    "model.hidden": ("model", "hidden", int),
    "model.seed": ("model", "seed", int),
    "model.coord_scale": ("model", "coord_scale", float),
    "model.latent_scale": ("model", "latent_scale", float),
    "model.literal_xyz": ("model", "literal_xyz", _bool),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.lr": ("train", "lr", float),
    "train.lr_step": ("train", "lr_step", int),
    "train.lr_factor": ("train", "lr_factor", float),
    "train.seed": ("train", "seed", int),
    "train.mix": ("train", "mix", float),
    "train.lambda": ("weights", "lam", float),
    "train.sigma": ("weights", "sigma", float),
    "train.omega": ("weights", "omega", float),
    "train.eta": ("weights", "eta", float),
    "drop.rho_min": ("train", "rho_min", float),
    "drop.rho_max": ("train", "rho_max", float),
    "drop.beta": ("train", "beta", float),
    "drop.gamma": ("train", "gamma", float),
    "drop.strategy": ("train", "strategy", str),
}


@dataclass
class DataConfig:
    """Either explicit cloud files (``paths``) or a seeded synthetic set."""

    count: int = 64
    points: int = 2048
    seed: int = 0
    test_count: int = 8
    paths: tuple = ()
    normalize: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        w = self.train.weights
        for name in ("lam", "sigma", "omega", "eta"):
            if getattr(w, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if not 1e-5 <= w.lam <= 1e-2:
            warnings.warn(f"train.lambda={w.lam} lies outside the usual [1e-5, 1e-2] band", stacklevel=2)
        t = self.train
        if not 0.0 <= t.rho_min <= t.rho_max <= 1.0:
            raise ConfigError("need 0 <= drop.rho_min <= drop.rho_max <= 1")
        if not 0.0 <= t.beta <= 1.0 or not 0.0 < t.gamma <= 1.0 or not 0.0 <= t.mix <= 1.0:
            raise ConfigError("drop.beta and train.mix must lie in [0, 1], drop.gamma in (0, 1]")
        if t.strategy not in STRATEGIES:
            raise ConfigError(f"drop.strategy must be one of {STRATEGIES}")
        if not self.data.paths and self.data.count <= self.data.test_count:
            raise ConfigError("data.count must exceed data.test_count")
        return self

    def to_flat(self) -> dict:
        out = {}
        for key, (section, attr, _) in KEYS.items():
            v = getattr(self._section(section), attr)
            out[key] = ",".join(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        sections = {"data": {}, "model": {}, "train": {}, "weights": {}}
        for key, raw in flat.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            section, attr, parse = KEYS[key]
            try:
                sections[section][attr] = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        try:
            weights = dataclasses.replace(LossWeights(), **sections["weights"])
            cfg = cls(DataConfig(**sections["data"]), ModelConfig(**sections["model"]),
                      TrainConfig(weights=weights, **sections["train"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    def _section(self, name):
        return self.train.weights if name == "weights" else getattr(self, name)


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        flat[key] = value
    return flat


def format_config(flat: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


def parse_overrides(args) -> dict:
    """``['--model.C=16', ...]`` to a flat dict."""
    flat = {}
    for a in args:
        if not a.startswith("--") or "=" not in a:
            raise ConfigError(f"override {a!r} is not of the form --key=value")
        key, value = a[2:].split("=", 1)
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = value
    return flat


def load_run_config(path=None, overrides=()) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                flat.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    flat.update(parse_overrides(overrides))
    return RunConfig.from_flat(flat)
