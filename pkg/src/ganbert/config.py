"""Run configuration: one YAML file with a section per component.

```yaml
data: {mri_dims: [64, 64, 64], pet_dims: [2, 24, 19, 19], n_pairs: 4}
generator: {base_channels: 8}
bert: {layers: 4, hidden: 256}
train: {total_steps: 300, base_lr: 1.0e-4}
weights: {nsp: 20, mlm: 1, l1: 20}
```

Environment variables ``GANBERT_<SECTION>__<KEY>`` override file values
(parsed as YAML scalars); command-line flags override both.
"""
from __future__ import annotations

import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from .bert import BertConfig
from .generator import GeneratorConfig
from .training import LossWeights, TrainConfig
from .volume import DataConfig

ENV_PREFIX = "GANBERT_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    n_pairs: int = 4
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    bert: BertConfig = field(default_factory=BertConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(total_steps=300))
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "data": {**_plain(asdict(self.data)), "n_pairs": self.n_pairs},
            "generator": _plain(asdict(self.generator)),
            "bert": _plain(asdict(self.bert)),
            "train": _plain(asdict(self.train)),
            "weights": _plain(asdict(self.weights)),
        }
        return out

    @classmethod
    def from_dict(cls, raw: Optional[Mapping[str, Any]]) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {"data", "generator", "bert", "train", "weights"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        data = dict(raw.get("data") or {})
        n_pairs = int(data.pop("n_pairs", 4))
        try:
            cfg = cls(
                data=_build(DataConfig, data, "data"),
                n_pairs=n_pairs,
                generator=_build(GeneratorConfig, raw.get("generator"), "generator"),
                bert=_build(BertConfig, raw.get("bert"), "bert"),
                train=_build(TrainConfig, {"total_steps": 300, **(raw.get("train") or {})}, "train"),
                weights=_build(LossWeights, raw.get("weights"), "weights"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if n_pairs < 0:
            raise ConfigError("data.n_pairs must be >= 0")
        cfg.check_dims()
        return cfg

    def check_dims(self) -> None:
        if tuple(self.data.mri_dims) != tuple(self.generator.input_dims):
            raise ConfigError(f"data.mri_dims {self.data.mri_dims} != generator.input_dims {self.generator.input_dims}")
        if tuple(self.data.pet_dims) != tuple(self.generator.output_dims):
            raise ConfigError(f"data.pet_dims {self.data.pet_dims} != generator.output_dims {self.generator.output_dims}")


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(value, default, key):
    # YAML 1.1 reads "1e-4" as a string; follow the type of the field default
    if isinstance(default, bool) or value is None:
        return value
    try:
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int):
            return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    return value


def _build(cls, values, section):
    values = dict(values or {})
    known = {f.name: f for f in fields(cls)}
    extra = set(values) - set(known)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    defaults = {n: f.default for n, f in known.items() if f.default is not MISSING}
    values = {k: _coerce(v, defaults.get(k), f"{section}.{k}") for k, v in values.items()}
    return cls(**values)


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, Any]]:
    """``GANBERT_TRAIN__BASE_LR=3e-4`` -> ``{"train": {"base_lr": "3e-4"}}``; typed later by ``_build``."""
    environ = os.environ if environ is None else environ
    out: Dict[str, Dict[str, Any]] = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].partition("__")
        out.setdefault(section.lower(), {})[name.lower()] = yaml.safe_load(value)
    return out


def merge(base: Dict[str, Any], extra: Mapping[str, Mapping[str, Any]]) -> Dict[str, Any]:
    out = {k: dict(v or {}) for k, v in base.items()}
    for section, values in extra.items():
        out.setdefault(section, {}).update(values)
    return out


def load_config(path=None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(merge(raw, env_overrides(environ)))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """One seed drives data synthesis, model init and every training draw."""
    return replace(cfg, data=replace(cfg.data, seed=seed), train=replace(cfg.train, seed=seed))
