"""Run configuration: a strict, nested key/value document (YAML on disk)
covering the model, training, dataset, and experiment sections. Unknown
keys are rejected with their full path; a parsed config dumps back to an
equivalent document."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import yaml

from .block import BlockVariant
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration (maps to CLI exit code 2)."""


@dataclass
class DataConfig:
    kind: str = "mqar"  # or "needle"
    vocab: int = 64
    length: int = 128
    pairs: int = 8
    queries: int | None = None
    needle_position: int | None = None
    eval_count: int = 64
    eval_seed: int = 9999

    def __post_init__(self):
        if self.kind not in ("mqar", "needle"):
            raise ConfigError(f"data.kind must be 'mqar' or 'needle', got {self.kind!r}")

    def mqar_spec(self, seed: int):
        from .data import MqarSpec

        return MqarSpec(
            vocab=self.vocab, length=self.length, pairs=self.pairs, queries=self.queries, seed=seed
        )

    def needle_spec(self, seed: int):
        from .data import NeedleSpec

        # query + answer occupy the last two positions of a length-L sequence
        return NeedleSpec(
            vocab=self.vocab,
            context_length=self.length - 2,
            pairs=self.pairs,
            needle_position=self.needle_position,
            seed=seed,
        )

    def spec(self, seed: int):
        return self.mqar_spec(seed) if self.kind == "mqar" else self.needle_spec(seed)


@dataclass
class ExperimentConfig:
    switch_position: int | None = None  # None: mid-sequence
    smoothing_window: int = 9
    split_fraction: float = 0.975
    eval_count: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/default"
    log_wall_time: bool = False
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.model.vocab_size != self.data.vocab:
            raise ConfigError("model.vocab_size and data.vocab must agree")


_NESTED = {
    ModelConfig: {"variant": BlockVariant},
    RunConfig: {
        "model": ModelConfig,
        "train": TrainConfig,
        "data": DataConfig,
        "experiment": ExperimentConfig,
    },
}


def _build(cls, doc: Any, path: str):
    """Construct a dataclass from a mapping, rejecting unknown keys and
    recursing into nested sections."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for name, value in doc.items():
        sub = nested.get(name)
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}{name}.") if isinstance(value, (dict, type(None))) else value
        elif name == "betas" and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def run_config_from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "")


def run_config_to_dict(config: RunConfig) -> dict:
    d = dataclasses.asdict(config)
    d["train"]["betas"] = list(d["train"]["betas"])
    return d


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return run_config_from_dict(doc or {})


def dump_run_config(config: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(run_config_to_dict(config), f, sort_keys=True)
