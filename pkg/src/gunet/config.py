"""Run configuration: INI-style text files with [model], [train] and
[data] sections, command-line overrides and ablation shorthands.

Example file::

    [model]
    preset = T
    fusion_kind = sum

    [train]
    epochs = 10
    ghost_norm_size = 1

    [data]
    n = 200
    size = 64
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .arch import ModelConfig
from .errors import ConfigError, DataIOError
from .train import TrainConfig

ABLATION_ALIASES = {
    "blocks": "base_blocks",
    "width": "base_width",
    "k": "dw_kernel",
    "kernel": "dw_kernel",
    "stages": "n_stages",
    "norm": "norm_kind",
    "gate": "gate_kind",
    "nonlin": "nonlin_ablation",
    "fusion": "fusion_kind",
    "attention": "extra_attention",
    "width_mult": "width_multiplier",
}


@dataclass
class DataConfig:
    n: int = 200
    size: int = 64
    seed: int = 0
    depth_kind: str = "mixed"
    val_n: int = 32
    val_seed: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("T"))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    preset: str | None = "T"

    def to_dict(self) -> dict:
        return {"preset": self.preset, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "data": asdict(self.data)}


def _coerce(value: str, default):
    """Parse ``value`` using the type of the field default."""
    v = value.strip()
    try:
        if isinstance(default, bool):
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(v)
            return v.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, tuple):
            return tuple(float(x) for x in v.strip("()[]").split(","))
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(default).__name__}") from None
    if v.isdigit():
        return int(v)
    return v


def _apply(cls, base, values: dict, section: str):
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    out = dict(known)
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(known)}")
        out[key] = _coerce(raw, known[key]) if isinstance(raw, str) else raw
    return cls(**out)


def parse_ablations(items) -> dict[str, str]:
    """``["fusion=sum", "k=7"]`` -> ``{"fusion_kind": "sum", "dw_kernel": "7"}``."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"ablation {item!r} is not of the form key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        out[ABLATION_ALIASES.get(key, key)] = value
    return out


def build_run_config(path=None, preset: str | None = None, model_overrides=None,
                     train_overrides=None, data_overrides=None) -> RunConfig:
    """Resolve a RunConfig: defaults < config file < explicit overrides."""
    sections: dict[str, dict] = {"model": {}, "train": {}, "data": {}}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise DataIOError(f"config file not found: {p}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(p)
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from e
        for name in cp.sections():
            if name not in sections:
                raise ConfigError(f"{p}: unknown section [{name}]")
            sections[name] = dict(cp[name])
    model_vals = {**sections["model"], **(model_overrides or {})}
    preset = model_vals.pop("preset", None) if preset is None else preset
    model_vals.pop("preset", None)
    base = ModelConfig.preset(preset) if preset else ModelConfig()
    model = _apply(ModelConfig, base, model_vals, "model")
    train = _apply(TrainConfig, TrainConfig(), {**sections["train"], **(train_overrides or {})}, "train")
    data = _apply(DataConfig, DataConfig(), {**sections["data"], **(data_overrides or {})}, "data")
    return RunConfig(model, train, data, preset)


def write_config(run: RunConfig, path) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    model = run.model.to_dict()
    cp["model"] = {k: str(v) for k, v in model.items()}
    cp["train"] = {k: (",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v))
                   for k, v in run.train.to_dict().items()}
    cp["data"] = {k: str(v) for k, v in asdict(run.data).items()}
    path = Path(path)
    with open(path, "w") as fh:
        cp.write(fh)
    return path
