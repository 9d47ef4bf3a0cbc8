"""Pretraining (parallel VC, TTS, AE) and the two-step fine-tuning schedule."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, ShapeError
from ..layers import freeze_scopes
from .data import FeatureBank, pair_entries
from .model import AlignmentModel, alignment_loss

logger = logging.getLogger(__name__)


class AlignStage(str, enum.Enum):
    PRETRAIN_PARALLEL_VC = "PRETRAIN_PARALLEL_VC"
    PRETRAIN_TTS = "PRETRAIN_TTS"
    PRETRAIN_AE = "PRETRAIN_AE"
    FT_SYNTHETIC_EL = "FT_SYNTHETIC_EL"
    FT_TARGET_EL = "FT_TARGET_EL"

    @property
    def is_pretrain(self) -> bool:
        return self.value.startswith("PRETRAIN")


@dataclass
class StageRecipe:
    stage: AlignStage
    data: dict
    pair_with: str = "parallel"
    epochs: int = 10
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    warmup_steps: int = 0
    batch_size: int = 16
    frozen_scopes: list = field(default_factory=list)
    dev: dict | None = None
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.stage = AlignStage(self.stage)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.stage == AlignStage.PRETRAIN_AE and not self.frozen_scopes:
            self.frozen_scopes = ["decoder"]

    def describe(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d


def lineage_of(model: AlignmentModel) -> list:
    return list(getattr(model, "meta", {}).get("lineage", []))


def _set_lineage(model: AlignmentModel, lineage: list) -> None:
    meta = dict(getattr(model, "meta", {}) or {})
    meta["lineage"] = lineage
    meta["features"] = {"in": model.config.in_type, "out": model.config.out_type}
    model.meta = meta


def train_step(model: AlignmentModel, optimizer, inputs, targets, text: bool = False, grad_clip: float = 1.0) -> dict:
    """One teacher-forced update; returns the float loss breakdown."""
    if len(inputs) != len(targets) or not inputs:
        raise ShapeError("need a non-empty batch of parallel (source, target) sequences")
    model.train()
    losses = alignment_loss(model, inputs, targets, text=text)
    optimizer.zero_grad()
    losses["total"].backward()
    params = [p for p in model.parameters() if p.requires_grad]
    torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    return {k: v.item() for k, v in losses.items()}


def _features(bank: FeatureBank, model: AlignmentModel, pairs, text: bool):
    c = model.config
    src_kind = "text" if text else c.in_type
    xs = [bank.get(s, src_kind) for s, _ in pairs]
    ys = [bank.get(t, c.out_type) for _, t in pairs]
    return xs, ys


def dev_loss(model: AlignmentModel, xs, ys, text: bool = False, batch_size: int = 32) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(xs), batch_size):
            part = alignment_loss(model, xs[i : i + batch_size], ys[i : i + batch_size], text=text)
            total += (part["l1"] + part["stop"]).item() * len(xs[i : i + batch_size])
    return total / len(xs)


def run_stage(model: AlignmentModel, recipe: StageRecipe, bank: FeatureBank, ckpt_dir=None) -> tuple[AlignmentModel, list]:
    """Train a copy of ``model`` under ``recipe``; returns (model, history)."""
    model = model.clone()
    model.meta = dict(getattr(model, "meta", {}) or {})
    text = recipe.stage == AlignStage.PRETRAIN_TTS
    pairs = pair_entries(bank.manifest, recipe.data, "self" if recipe.stage in (AlignStage.PRETRAIN_TTS, AlignStage.PRETRAIN_AE) else recipe.pair_with)
    history: list = []
    lineage = lineage_of(model) + [{"stage": recipe.stage.value, "epochs": recipe.epochs, "pairs": len(pairs), "data": recipe.data}]
    if recipe.epochs == 0:
        _set_lineage(model, lineage)
        return model, history

    xs, ys = _features(bank, model, pairs, text)
    if not bool(model.out_fitted):
        model.set_normalizer(outputs=ys)
    if not text and not bool(model.in_fitted):
        model.set_normalizer(inputs=xs)
    dev = None
    if recipe.dev:
        dpairs = pair_entries(bank.manifest, recipe.dev, "self" if text or recipe.stage == AlignStage.PRETRAIN_AE else recipe.pair_with)
        dev = _features(bank, model, dpairs, text)

    for p in model.parameters():
        p.requires_grad_(True)
    frozen = freeze_scopes(model, recipe.frozen_scopes)
    if recipe.frozen_scopes and not frozen:
        raise ConfigError(f"frozen scopes {recipe.frozen_scopes} match no parameters")
    torch.manual_seed(recipe.seed)
    rng = np.random.default_rng(recipe.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=recipe.lr, betas=(0.9, 0.98))
    total_steps = math.ceil(len(xs) / recipe.batch_size) * recipe.epochs
    step = 0
    for epoch in range(1, recipe.epochs + 1):
        order = rng.permutation(len(xs))
        running = []
        for i in range(0, len(xs), recipe.batch_size):
            idx = order[i : i + recipe.batch_size]
            factor = 1.0
            if recipe.warmup_steps and step < recipe.warmup_steps:
                factor = (step + 1) / recipe.warmup_steps
            elif recipe.lr_schedule == "cosine":
                factor = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for g in opt.param_groups:
                g["lr"] = recipe.lr * factor
            out = train_step(model, opt, [xs[j] for j in idx], [ys[j] for j in idx], text=text, grad_clip=recipe.grad_clip)
            running.append(out["total"])
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(running))}
        if dev is not None:
            record["dev_loss"] = dev_loss(model, *dev, text=text)
        history.append(record)
        logger.info("%s epoch %d: %s", recipe.stage.value, epoch, record)
        if ckpt_dir is not None:
            _set_lineage(model, lineage)
            model.meta["history"] = history
            model.save(Path(ckpt_dir) / f"epoch{epoch:03d}.ckpt", meta=model.meta)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    _set_lineage(model, lineage)
    model.meta["history"] = history
    return model, history


def pretrain(model: AlignmentModel, recipe: StageRecipe, bank: FeatureBank, ckpt_dir=None) -> AlignmentModel:
    if not recipe.stage.is_pretrain:
        raise ConfigError(f"{recipe.stage.value} is not a pretraining stage")
    if recipe.stage == AlignStage.PRETRAIN_AE and not any(s["stage"] == AlignStage.PRETRAIN_TTS.value for s in lineage_of(model)):
        raise ConfigError("AE pretraining needs a TTS-pretrained model")
    if recipe.stage == AlignStage.PRETRAIN_TTS and model.config.out_type not in ("units", "mel"):
        raise ConfigError("TTS pretraining needs an acoustic output type")
    return run_stage(model, recipe, bank, ckpt_dir)[0]


_FT_ORDER = [AlignStage.FT_SYNTHETIC_EL, AlignStage.FT_TARGET_EL]


def finetune_schedule(model: AlignmentModel, recipes, bank: FeatureBank, ckpt_root=None) -> tuple[AlignmentModel, dict]:
    """Fine-tune on synthetic EL, then on target EL; returns (final model, per-stage models)."""
    recipes = list(recipes)
    if [r.stage for r in recipes] != _FT_ORDER:
        raise ConfigError(f"fine-tuning must run {[s.value for s in _FT_ORDER]} in that order")
    if not any(AlignStage(s["stage"]).is_pretrain for s in lineage_of(model)):
        raise ConfigError("fine-tuning needs a pretrained model")
    stages = {}
    for r in recipes:
        ckpt_dir = Path(ckpt_root) / r.stage.value.lower() if ckpt_root is not None else None
        model, _ = run_stage(model, r, bank, ckpt_dir)
        stages[r.stage.value] = model
    return model, stages
