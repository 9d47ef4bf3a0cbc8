"""Stage-wise recognizer training (pretrain, intermediate fine-tune, EL fine-tune)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..corpus import Manifest, SpeechType
from ..errors import ConfigError
from ..evaluation.metrics import corpus_cer
from ..features import FeatureStore
from .decode import decode
from .loss import LOSS_MODES, compute_loss
from .model import RecognitionBatch, Recognizer

logger = logging.getLogger(__name__)


@dataclass
class RecognitionRecipe:
    """One training stage.

    ``data`` and ``dev`` are manifest selectors (keyword arguments of
    :meth:`Manifest.select`). ``loss_mode`` is ``standard`` (CTC + attention on
    everything), ``intermediate`` (speech-type loss on everything, CTC and
    attention on EL only) or ``intermediate_no_mask`` (all three terms on
    everything).
    """

    name: str
    data: dict
    loss_mode: str = "standard"
    epochs: int = 10
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # constant | cosine
    warmup_steps: int = 0
    batch_size: int = 32
    dev: dict | None = None
    sid_weight: float = 1.0
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    model: Recognizer
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def load_batch(store: FeatureStore, manifest: Manifest) -> RecognitionBatch:
    return RecognitionBatch(
        [store.mel(e.utterance_id) for e in manifest],
        [tuple(e.transcript) for e in manifest],
        [SpeechType(e.speech_type) for e in manifest],
    )


def _select(store: FeatureStore, selector: dict | None, what: str) -> Manifest:
    if not selector:
        raise ConfigError(f"{what}: no data selector")
    subset = store.manifest.select(**selector)
    if len(subset) == 0:
        raise ConfigError(f"{what}: selector {selector} matches no utterances")
    return subset


def _lr_factor(step: int, total: int, recipe: RecognitionRecipe) -> float:
    if recipe.warmup_steps and step < recipe.warmup_steps:
        return (step + 1) / recipe.warmup_steps
    if recipe.lr_schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def mean_loss(model: Recognizer, batch: RecognitionBatch, mode: str, sid_weight: float = 1.0, batch_size: int = 64) -> dict:
    model.eval()
    sums = {"total": 0.0, "sid": 0.0, "ctc": 0.0, "attn": 0.0}
    n = 0
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            idx = list(range(start, min(start + batch_size, len(batch))))
            br = compute_loss(model, batch.subset(idx), mode, sid_weight)
            for k, v in br.as_floats().items():
                sums[k] += v * len(idx)
            n += len(idx)
    return {k: v / max(n, 1) for k, v in sums.items()}


def train_stage(model: Recognizer, recipe: RecognitionRecipe, store: FeatureStore, ckpt_dir=None) -> TrainResult:
    """Train a copy of ``model``; the input model is left untouched."""
    data = _select(store, recipe.data, recipe.name)
    dev = _select(store, recipe.dev, recipe.name + " dev") if recipe.dev else None
    model = model.clone()
    result = TrainResult(model)
    if recipe.epochs == 0:
        return result

    train_batch = load_batch(store, data)
    dev_batch = load_batch(store, dev) if dev is not None else None
    if not bool(model.norm_fitted):
        model.set_normalizer(train_batch.features)
    torch.manual_seed(recipe.seed)
    gen = np.random.default_rng(recipe.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=recipe.lr, betas=(0.9, 0.98))
    n = len(train_batch)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total = steps_per_epoch * recipe.epochs
    step = 0
    for epoch in range(1, recipe.epochs + 1):
        model.train()
        order = gen.permutation(n)
        running = []
        for start in range(0, n, recipe.batch_size):
            idx = order[start : start + recipe.batch_size].tolist()
            for g in opt.param_groups:
                g["lr"] = recipe.lr * _lr_factor(step, total, recipe)
            br = compute_loss(model, train_batch.subset(idx), recipe.loss_mode, recipe.sid_weight)
            opt.zero_grad()
            br.total.backward()
            torch.nn.utils.clip_grad_norm_(params, recipe.grad_clip)
            opt.step()
            running.append(br.total.item())
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(running))}
        if dev_batch is not None:
            record["dev"] = mean_loss(model, dev_batch, recipe.loss_mode, recipe.sid_weight)
        result.history.append(record)
        logger.info("%s epoch %d: %s", recipe.name, epoch, record)
        if ckpt_dir is not None:
            path = Path(ckpt_dir) / f"epoch{epoch:03d}.ckpt"
            model.save(path, meta={"recipe": asdict(recipe), "epoch": epoch, "history": result.history})
            result.checkpoints.append(path)
    model.eval()
    return result


def evaluate_cer(model: Recognizer, store: FeatureStore, manifest: Manifest, mode: str = "greedy") -> float:
    pairs = [(e.transcript, decode(model, store.mel(e.utterance_id), mode)) for e in manifest]
    return corpus_cer(pairs)


def sid_accuracy(model: Recognizer, store: FeatureStore, manifest: Manifest) -> float:
    batch = load_batch(store, manifest)
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), 64):
            sub = batch.subset(range(start, min(start + 64, len(batch))))
            logits = model(sub, teacher_forcing=False).sid_logits
            labels = torch.tensor([s == SpeechType.EL for s in sub.speech_types])
            correct += int(((logits > 0) == labels).sum())
    return correct / len(batch)
