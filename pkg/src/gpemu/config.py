"""
Run configuration for the command-line pipeline.

A config file is a JSON object with any subset of these sections::

    {
      "seed": 0,
      "output_dir": "runs",
      "data":   {"path", "n_sets", "n_nuclides", "mask_fraction", "train_fraction"},
      "train":  {TrainConfig fields except seed},
      "sweep":  {"m_values", "families", "workers"},
      "bench":  {"repetitions", "points"},
      "mle":    {"rounds", "steps", "lr", "threshold", "max_step"},
      "nuts":   {"warmup", "samples", "max_depth", "target_accept", "chains"},
      "likelihood": {"diagonal"}
    }

Unknown sections or keys raise :class:`ConfigError`. Values resolve with the
precedence command-line flags > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .inference import MLE_MAX_STEP, STABILITY_THRESHOLD
from .training import INDUCING_SWEEP, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str | None = None
    n_sets: int = 500
    n_nuclides: int = 75
    mask_fraction: float = 0.0
    train_fraction: float = 0.8


@dataclass
class SweepSection:
    m_values: tuple = INDUCING_SWEEP
    families: tuple = ("sgp",)
    workers: int = 1


@dataclass
class BenchSection:
    repetitions: int = 30
    points: str | None = None


@dataclass
class MleSection:
    rounds: int = 10
    steps: int = 100
    lr: float = 0.01
    threshold: float = STABILITY_THRESHOLD
    max_step: float = MLE_MAX_STEP


@dataclass
class NutsSection:
    warmup: int = 100
    samples: int = 10000
    max_depth: int = 5
    target_accept: float = 0.70
    chains: int = 1


@dataclass
class LikelihoodSection:
    diagonal: bool = False


def _train_default():
    return TrainConfig()


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=_train_default)
    sweep: SweepSection = field(default_factory=SweepSection)
    bench: BenchSection = field(default_factory=BenchSection)
    mle: MleSection = field(default_factory=MleSection)
    nuts: NutsSection = field(default_factory=NutsSection)
    likelihood: LikelihoodSection = field(default_factory=LikelihoodSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(d)
        return cfg

    def update(self, d: dict, source="config"):
        """Merge a (possibly partial) nested dict into this config in place."""
        if not isinstance(d, dict):
            raise ConfigError(f"{source}: expected a JSON object")
        for key, value in d.items():
            if key not in _SECTIONS and key not in ("seed", "output_dir"):
                raise ConfigError(f"{source}: unknown key {key!r}")
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"{source}: section {key!r} must be an object")
                setattr(self, key, _merge_section(getattr(self, key), value, f"{source}.{key}"))
            else:
                setattr(self, key, value)
        self.train = dataclasses.replace(self.train, seed=int(self.seed))
        self.validate()
        return self

    def set_path(self, dotted: str, value):
        """Override one value by dotted name, e.g. ``"nuts.samples"``."""
        head, _, tail = dotted.partition(".")
        self.update({head: {tail: value}} if tail else {head: value}, source="flag")

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not 0 < self.data.train_fraction <= 1:
            raise ConfigError("data.train_fraction must be in (0, 1]")
        if not 0 <= self.data.mask_fraction < 1:
            raise ConfigError("data.mask_fraction must be in [0, 1)")
        if self.mle.rounds < 1 or self.mle.steps < 1:
            raise ConfigError("mle.rounds and mle.steps must be positive")
        if not 0 < self.nuts.target_accept < 1:
            raise ConfigError("nuts.target_accept must be in (0, 1)")
        if self.nuts.max_depth < 1 or self.nuts.samples < 10 or self.nuts.warmup < 0:
            raise ConfigError("nuts settings out of range")
        if self.sweep.workers < 1 or self.bench.repetitions < 2:
            raise ConfigError("sweep.workers must be >= 1 and bench.repetitions >= 2")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for sec in out.values():
            if isinstance(sec, dict):
                for k, v in sec.items():
                    if isinstance(v, tuple):
                        sec[k] = list(v)
        return out

    def echo(self) -> str:
        """Canonical JSON rendering with sorted keys."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = ("data", "train", "sweep", "bench", "mle", "nuts", "likelihood")


def _merge_section(current, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(current)}
    changes = {}
    for key, value in values.items():
        if key not in names or (where.endswith(".train") and key == "seed"):
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = getattr(current, key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected a boolean")
        elif isinstance(default, int) and isinstance(value, float) and value.is_integer():
            value = int(value)
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        changes[key] = value
    try:
        return dataclasses.replace(current, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (dotted name -> value)."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg.update(data, source=str(path))
    for name, value in (overrides or {}).items():
        if value is not None:
            cfg.set_path(name, value)
    return cfg
