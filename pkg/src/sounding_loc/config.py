"""Run configuration: a JSON tree of sections with dot-path overrides.

The tree has ``data``, ``model``, ``stage1``, ``stage2``, ``metrics`` and
``paths`` sections plus top-level ``seed`` and ``threads``. Defaults describe
the toy-world pipeline. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

from .data import JitterParams, ToyWorldSpec
from .errors import ConfigError
from .metrics import MetricConfig
from .models import BackboneConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config

CONFIG_VERSION = 1


def _fields(cls, **changes) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    out.update(changes)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def default_config() -> dict:
    stage1 = _fields(Stage1Config, lr=1e-3)
    stage1.pop("seed")
    stage2 = _fields(Stage2Config)
    stage2.pop("seed")
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "threads": 1,
        "data": {
            "num_classes": 4,
            "n_solos": 200,
            "n_cocktails": 100,
            "test_fraction": 0.3,
            "noise_level": 0.05,
            "frame_size": 112,
            "notes": [2, 4],
            "jitter": {"gain_range": [0.5, 1.5], "max_shift_s": 0.1},
        },
        "model": {"profile": "toy"},
        "stage1": stage1,
        "stage2": stage2,
        "metrics": _fields(MetricConfig),
        # Optional locations of upstream artifacts; default to sibling
        # command directories under the output dir.
        "paths": {"data": None, "stage1": None, "stage2": None},
    }


def parse_value(text: str):
    """JSON literal when it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {'.'.join(keys[: i + 1])!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = item.split("=", 1)
        set_path(cfg, key.strip(), parse_value(text))
    return cfg


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None, seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def save_config(cfg: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# Typed views -----------------------------------------------------------------


def _build(cls, section: dict, name: str, **extra):
    try:
        return cls(**section, **extra)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def toy_spec(cfg: dict) -> ToyWorldSpec:
    d = cfg["data"]
    notes = d.get("notes")
    return _build(ToyWorldSpec, {
        "num_classes": d["num_classes"],
        "noise_level": d["noise_level"],
        "frame_size": d["frame_size"],
        "notes": None if notes is None else tuple(notes),
    }, "data", seed=cfg["seed"])


def jitter_params(cfg: dict) -> JitterParams:
    j = cfg["data"]["jitter"]
    return _build(JitterParams, {"gain_range": tuple(j["gain_range"]), "max_shift_s": j["max_shift_s"]}, "data.jitter")


def stage1_config(cfg: dict) -> Stage1Config:
    s = dict(cfg["stage1"])
    s["audio_mix_gain"] = tuple(s["audio_mix_gain"])
    return _build(Stage1Config, s, "stage1", seed=cfg["seed"])


def stage2_config(cfg: dict) -> Stage2Config:
    return _build(Stage2Config, dict(cfg["stage2"]), "stage2", seed=cfg["seed"])


def metric_config(cfg: dict) -> MetricConfig:
    m = dict(cfg["metrics"])
    m["iou_thresholds"] = tuple(m["iou_thresholds"])
    return _build(MetricConfig, m, "metrics")


def backbones(cfg: dict) -> tuple[BackboneConfig, BackboneConfig]:
    profile = cfg["model"]["profile"]
    if profile == "toy":
        return BackboneConfig.toy(3), BackboneConfig.toy(1)
    if profile == "paper":
        return BackboneConfig.paper(3), BackboneConfig.paper(1)
    raise ConfigError(f"unknown model profile {profile!r}")
