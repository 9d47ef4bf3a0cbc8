"""Experiment configuration: one tree with a global seed and a section per stage."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from ..corpus import CorpusConfig, load_config_file
from ..errors import ConfigError

# The five compared systems: (inputs, outputs, pretraining).
SYSTEMS = {
    "1": ("mel", "mel", "tts_ae"),
    "2": ("mel", "mel", "parallel_vc"),
    "3": ("bnf", "units", "tts_ae"),
    "4": ("bnf", "units", "parallel_vc"),
    "5": ("bnf", "mel", "parallel_vc"),
}

DEFAULTS: dict = {
    "seed": 0,
    "corpus": {},
    "recognition": {
        "model": {},
        "stage1": {"epochs": 3, "lr": 2e-3, "warmup_steps": 50, "batch_size": 32},
        "stage2": {"loss_mode": "intermediate", "epochs": 3, "lr": 5e-4, "lr_schedule": "constant"},
        "stage3": {"epochs": 10, "lr": 5e-4, "lr_schedule": "constant"},
    },
    "units": {"k": 64, "tau": 1.0, "max_frames": 60000},
    "synthesis": {
        "model": {"steps": 100, "x0_weight_cap": 20.0},
        "pretrain": {"steps": 4000, "lr": 2e-3, "batch_size": 16},
        "adapt": {"steps": 1000, "lr": 1e-3, "batch_size": 16},
        "guidance": 1.0,
    },
    "alignment": {
        "seed": None,  # None = global seed; lets alignment be re-seeded without retraining upstream
        "model": {"guided_attention": 1.0, "prenet_dropout": 0.5},
        "pretrain": {"epochs": 20, "lr": 1e-3, "warmup_steps": 100, "batch_size": 16},
        "ft_synthetic": {"epochs": 20, "lr": 5e-4, "batch_size": 16},
        "ft_target": {"epochs": 20, "lr": 3e-4, "batch_size": 16},
    },
    "vocoder": {"kind": "griffin_lim", "iterations": 60},
    "systems": ["1", "2", "3", "4", "5"],
    "evaluation": {"split": "test", "max_utterances": None, "seed": 0},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: dict, allowed: dict, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def validate(cfg: dict) -> dict:
    _check_keys(cfg, DEFAULTS, "config")
    for name in ("recognition", "units", "synthesis", "alignment", "evaluation"):
        _check_keys(cfg[name], DEFAULTS[name], name)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    CorpusConfig.from_dict(cfg["corpus"]).validate()
    bad = [s for s in cfg["systems"] if str(s) not in SYSTEMS]
    if bad or not cfg["systems"]:
        raise ConfigError(f"systems must be a non-empty subset of {sorted(SYSTEMS)}, got {cfg['systems']}")
    cfg["systems"] = [str(s) for s in cfg["systems"]]
    if cfg["recognition"]["stage2"].get("loss_mode", "intermediate") not in ("standard", "intermediate", "intermediate_no_mask"):
        raise ConfigError(f"bad stage2 loss_mode {cfg['recognition']['stage2'].get('loss_mode')!r}")
    if cfg["vocoder"].get("kind") not in ("griffin_lim", "external"):
        raise ConfigError(f"unknown vocoder kind {cfg['vocoder'].get('kind')!r}")
    return cfg


def load_config(source=None) -> dict:
    """Defaults merged with ``source`` (a dict, a JSON/YAML path, or None)."""
    if source is None:
        override = {}
    elif isinstance(source, dict):
        override = source
    else:
        override = load_config_file(Path(source))
        if not isinstance(override, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
    return validate(deep_merge(DEFAULTS, override))


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path
