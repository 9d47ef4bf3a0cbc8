"""Recognition losses, including the masked intermediate fine-tuning objective.

During intermediate fine-tuning the total is::

    L = w_sid * L_SID(all utterances) + L_ctc(EL only) + L_attn(EL only)

Each term is averaged over its own utterance subset. The EL subset is run
through the network as its own sub-batch, so the CTC and attention terms do
not depend (even bitwise) on which typical utterances share the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..corpus import SpeechType
from ..errors import ConfigError, EmptyBatch, ShapeError
from .model import RecognitionBatch, Recognizer, RecognizerOutput

LOSS_MODES = ("standard", "intermediate", "intermediate_no_mask")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    sid: torch.Tensor
    ctc: torch.Tensor
    attn: torch.Tensor
    n_utterances: int
    n_el: int

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("total", "sid", "ctc", "attn")}


def sid_loss(sid_logits: torch.Tensor, speech_types) -> torch.Tensor:
    """Mean binary cross-entropy; EL is the positive class."""
    speech_types = list(speech_types)
    if sid_logits.numel() == 0 or not speech_types:
        raise EmptyBatch("speech-type loss needs at least one utterance")
    if sid_logits.numel() != len(speech_types):
        raise ShapeError("one logit per utterance required")
    labels = torch.tensor(
        [1.0 if SpeechType(s) == SpeechType.EL else 0.0 for s in speech_types],
        dtype=sid_logits.dtype,
        device=sid_logits.device,
    )
    return F.binary_cross_entropy_with_logits(sid_logits.reshape(-1), labels)


def ctc_losses(out: RecognizerOutput) -> torch.Tensor:
    """Per-utterance CTC negative log-likelihood."""
    log_probs = out.ctc_logits.log_softmax(-1).transpose(0, 1)  # (T, B, C)
    targets = torch.cat([torch.tensor(t, dtype=torch.long) for t in out.targets])
    target_lengths = torch.tensor([len(t) for t in out.targets], dtype=torch.long)
    return F.ctc_loss(
        log_probs, targets, out.enc_lengths, target_lengths, blank=0, reduction="none", zero_infinity=True
    )


def attention_losses(out: RecognizerOutput, eos: int) -> torch.Tensor:
    """Per-utterance teacher-forced cross-entropy summed over tokens (incl. <eos>)."""
    logp = out.attn_logits.log_softmax(-1)
    losses = []
    for i, t in enumerate(out.targets):
        gold = torch.tensor(t + [eos], dtype=torch.long)
        losses.append(-logp[i, : len(gold)].gather(-1, gold[:, None]).sum())
    return torch.stack(losses)


def hybrid_loss(model: Recognizer, batch: RecognitionBatch) -> tuple[torch.Tensor, torch.Tensor, RecognizerOutput]:
    """Mean CTC and attention losses over every utterance of ``batch``."""
    out = model(batch)
    ctc = ctc_losses(out).mean()
    attn = attention_losses(out, model.config.sos_eos).mean()
    return ctc, attn, out


def compute_loss(model: Recognizer, batch: RecognitionBatch, mode: str = "standard", sid_weight: float = 1.0) -> LossBreakdown:
    if len(batch) == 0:
        raise EmptyBatch("empty recognition batch")
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}")
    zero = torch.zeros((), dtype=model.feat_mean.dtype)
    n_el = len(batch.el_indices())

    if mode == "standard":
        ctc, attn, _ = hybrid_loss(model, batch)
        return LossBreakdown(ctc + attn, zero, ctc, attn, len(batch), n_el)

    if mode == "intermediate_no_mask":
        ctc, attn, out = hybrid_loss(model, batch)
        sid = sid_loss(out.sid_logits, batch.speech_types)
        return LossBreakdown(sid_weight * sid + ctc + attn, sid, ctc, attn, len(batch), n_el)

    el_idx, typ_idx = batch.el_indices(), batch.typical_indices()
    sid_logits = [None] * len(batch)
    ctc = attn = zero
    if el_idx:
        el_batch = batch.subset(el_idx)
        ctc, attn, out = hybrid_loss(model, el_batch)
        for j, i in enumerate(el_idx):
            sid_logits[i] = out.sid_logits[j]
    if typ_idx:
        feats, lengths = model.pad_features([batch.features[i] for i in typ_idx])
        enc, _, enc_lengths = model.encode(feats, lengths)
        typ_sid = model.sid_from_encoder(enc, enc_lengths)
        for j, i in enumerate(typ_idx):
            sid_logits[i] = typ_sid[j]
    sid = sid_loss(torch.stack(sid_logits), batch.speech_types)
    return LossBreakdown(sid_weight * sid + ctc + attn, sid, ctc, attn, len(batch), n_el)


def loss_intermediate(model: Recognizer, batch: RecognitionBatch, sid_weight: float = 1.0) -> LossBreakdown:
    return compute_loss(model, batch, "intermediate", sid_weight)
