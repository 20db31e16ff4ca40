"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys are rejected so typos fail loudly.
Lines starting with ``#`` and trailing ``# ...`` comments are ignored.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .losses import LossWeights
from .net import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_WEIGHT_KEYS = {"lambda1": "l1", "lambda2": "ssim", "lambda3": "perceptual",
                "lambda4": "tv", "sobel_mix": "sobel_mix"}
_NET_KEYS = ("base_channels", "stacks", "init_seed")

DEFAULTS = {
    **{f.name: f.default for f in fields(TrainConfig)},
    **{k: getattr(NetConfig(), k) for k in _NET_KEYS},
    **{k: getattr(LossWeights(), v) for k, v in _WEIGHT_KEYS.items()},
    "data_root": "",
    "split": "train",
    "val_split": "",
    "out_dir": "",
}
_TYPES = {
    **{f.name: f.type for f in fields(TrainConfig)},
    **{k: "int" for k in _NET_KEYS},
    **{k: "float" for k in _WEIGHT_KEYS},
}


def _coerce(key: str, raw: str):
    kind = str(_TYPES.get(key, "str"))
    try:
        if kind.startswith("Optional") or "None" in kind:
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse(text: str) -> dict:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load(path) -> dict:
    return parse(Path(path).read_text(encoding="utf-8"))


def dump(values: dict) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(values.items()))


def train_config(values: dict) -> TrainConfig:
    return TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})


def net_config(values: dict) -> NetConfig:
    return NetConfig(**{k: values[k] for k in _NET_KEYS})


def loss_weights(values: dict) -> LossWeights:
    return LossWeights(**{v: values[k] for k, v in _WEIGHT_KEYS.items()})
