"""Run configuration and its ``key = value`` text format.

Keys are ``seed`` or ``<section>.<field>`` with section one of ``model``,
``train``, ``data``. Lists are comma-separated, booleans are true/false,
``#`` starts a comment. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec}
# model fields that follow the dataset unless set explicitly
_DERIVED = {"image_h": "height", "image_w": "width", "channels": "channels", "num_classes": "num_identities"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": self.data.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(ModelConfig.from_dict(d["model"]), TrainConfig.from_dict(d["train"]),
                   DatasetSpec.from_dict(d["data"]), int(d.get("seed", 0)))

    def replace(self, **model_overrides) -> "RunConfig":
        return RunConfig(dataclasses.replace(self.model, **model_overrides), self.train, self.data, self.seed)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    seed = 0
    defaults = {name: cls() for name, cls in SECTIONS.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = int(raw)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        fields_ = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if name not in fields_:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(raw, getattr(defaults[section], name), key)

    data = DatasetSpec(**values["data"])
    model_values = dict(values["model"])
    for mkey, dkey in _DERIVED.items():
        dval = getattr(data, dkey)
        if mkey in model_values and model_values[mkey] != dval:
            raise ConfigError(f"model.{mkey}={model_values[mkey]} conflicts with data.{dkey}={dval}")
        model_values[mkey] = dval
    return RunConfig(ModelConfig(**model_values), TrainConfig(**values["train"]), data, seed)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
