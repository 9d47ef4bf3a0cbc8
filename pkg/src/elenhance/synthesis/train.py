"""Multi-speaker pretraining and few-shot adaptation of the diffusion decoder."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..alignment.data import FeatureBank
from ..errors import ConfigError
from ..units import resample_units
from .diffusion import DiffusionDecoder, train_step
from .speaker import SpeakerEmbedding, toy_stats_embedding

logger = logging.getLogger(__name__)


@dataclass
class SynthesisRecipe:
    name: str
    data: dict
    steps: int = 2000  # optimizer updates
    lr: float = 2e-3
    batch_size: int = 16
    min_speakers: int = 1
    max_utterances: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    crop_frames: int = 0  # random training windows of this many mel frames; 0 = whole utterances

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


def speaker_embeddings(bank: FeatureBank, entries, dim: int) -> dict[str, SpeakerEmbedding]:
    """One TOY_STATS embedding per speaker from that speaker's utterances in ``entries``."""
    by_spk: dict[str, list] = {}
    for e in entries:
        by_spk.setdefault(e.speaker_id, []).append(e.utterance_id)
    return {spk: toy_stats_embedding([bank.store.waveform(u) for u in uids], dim) for spk, uids in sorted(by_spk.items())}


def training_examples(bank: FeatureBank, entries):
    """(mel, frame-aligned units) per utterance."""
    out = []
    for e in entries:
        mel = bank.get(e.utterance_id, "mel")
        units = resample_units(bank.get(e.utterance_id, "units"), len(mel))
        out.append((mel, units.astype(np.float32)))
    return out


def _crop(mels, units, size, rng):
    if size <= 0:
        return mels, units
    bm, bu = [], []
    for m, u in zip(mels, units):
        start = int(rng.integers(0, max(len(m) - size, 0) + 1))
        bm.append(m[start : start + size])
        bu.append(u[start : start + size])
    return bm, bu


def fit_decoder(decoder: DiffusionDecoder, recipe: SynthesisRecipe, bank: FeatureBank, embeddings=None, ckpt_dir=None) -> DiffusionDecoder:
    decoder = decoder.clone()
    decoder.meta = dict(getattr(decoder, "meta", {}) or {})
    entries = bank.manifest.select(**recipe.data).entries
    if not entries:
        raise ConfigError(f"{recipe.name}: selector {recipe.data} matches no utterances")
    if recipe.max_utterances is not None:
        entries = entries[: recipe.max_utterances]
    speakers = {e.speaker_id for e in entries}
    if len(speakers) < recipe.min_speakers:
        raise ConfigError(f"{recipe.name}: needs >= {recipe.min_speakers} speakers, found {len(speakers)}")
    lineage = list(decoder.meta.get("lineage", [])) + [{"phase": recipe.name, **asdict(recipe), "utterances": len(entries)}]
    decoder.meta["lineage"] = lineage
    if recipe.steps == 0:
        return decoder

    embeddings = dict(embeddings or {})
    missing = [s for s in speakers if s not in embeddings]
    if missing:
        embeddings.update(speaker_embeddings(bank, [e for e in entries if e.speaker_id in missing], decoder.config.spk_dim))
    examples = training_examples(bank, entries)
    if not bool(decoder.norm_fitted):
        decoder.set_normalizer([m for m, _ in examples])
    mels = [decoder.normalize(m) for m, _ in examples]
    units = [torch.as_tensor(u) for _, u in examples]
    spks = torch.as_tensor(np.stack([embeddings[e.speaker_id].vector for e in entries]), dtype=torch.float32)

    torch.manual_seed(recipe.seed)
    gen = torch.Generator().manual_seed(recipe.seed)
    rng = np.random.default_rng(recipe.seed)
    opt = torch.optim.Adam(decoder.parameters(), lr=recipe.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(recipe.steps, 1))
    running = []
    for step in range(1, recipe.steps + 1):
        idx = rng.choice(len(mels), size=min(recipe.batch_size, len(mels)), replace=False)
        bm, bu = _crop([mels[i] for i in idx], [units[i] for i in idx], recipe.crop_frames, rng)
        loss = train_step(decoder, opt, bm, bu, spks[idx], gen)
        sched.step()
        running.append(loss)
        if step % 200 == 0 or step == recipe.steps:
            logger.info("%s step %d: loss %.4f", recipe.name, step, float(np.mean(running[-200:])))
        if ckpt_dir is not None and recipe.checkpoint_every and step % recipe.checkpoint_every == 0:
            decoder.save(Path(ckpt_dir) / f"step{step:06d}.ckpt", meta=decoder.meta)
    decoder.eval()
    decoder.meta["final_loss"] = float(np.mean(running[-100:]))
    return decoder


def pretrain_multispeaker(decoder: DiffusionDecoder, recipe: SynthesisRecipe, bank: FeatureBank, ckpt_dir=None) -> DiffusionDecoder:
    if recipe.min_speakers < 8:
        recipe = SynthesisRecipe(**{**asdict(recipe), "min_speakers": 8})
    return fit_decoder(decoder, recipe, bank, ckpt_dir=ckpt_dir)


def adapt_fewshot(decoder: DiffusionDecoder, recipe: SynthesisRecipe, bank: FeatureBank, embedding: SpeakerEmbedding | None = None, ckpt_dir=None) -> DiffusionDecoder:
    """Full fine-tune on the target speaker (at most 116 utterances by default)."""
    if recipe.max_utterances is None:
        recipe = SynthesisRecipe(**{**asdict(recipe), "max_utterances": 116})
    entries = bank.manifest.select(**recipe.data).entries
    emb = {}
    if embedding is not None:
        emb = {spk: embedding for spk in {e.speaker_id for e in entries}}
    return fit_decoder(decoder, recipe, bank, emb, ckpt_dir)
