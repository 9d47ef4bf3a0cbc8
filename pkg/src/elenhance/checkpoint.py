"""Versioned checkpoint container: hyperparameters + tensors + lineage metadata."""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

from .errors import ConfigError, IoError

FORMAT = "elenhance-checkpoint"
VERSION = 1


def save(path, kind: str, config: dict, state_dict: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
        "meta": meta or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(payload, buf)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise IoError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a checkpoint of this package")
    if payload["version"] > VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload['version']} is newer than supported {VERSION}")
    if kind is not None and payload["kind"] != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    return payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
