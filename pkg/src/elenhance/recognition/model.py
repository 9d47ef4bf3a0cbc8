"""Hybrid CTC/attention recognizer with a speech-type head and a BNF bottleneck.

Token ids: 0 is the CTC blank, phonemes are 1..V in inventory order and
V + 1 doubles as <sos>/<eos> for the attention decoder.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .. import checkpoint
from ..corpus import INVENTORY, SpeechType
from ..errors import EmptyBatch, InvalidSymbol, ShapeError
from ..layers import (
    ConformerBlock,
    DecoderLayer,
    ScaledPositionalEncoding,
    causal_mask,
    lengths_to_mask,
    pad_list,
)

BLANK = 0
_SYMBOL_IDS = {s: i + 1 for i, s in enumerate(INVENTORY)}


def encode_symbols(symbols) -> list[int]:
    try:
        return [_SYMBOL_IDS[s] for s in symbols]
    except KeyError as exc:
        raise InvalidSymbol(f"unknown symbol {exc.args[0]!r}") from None


def decode_ids(ids) -> list[str]:
    return [INVENTORY[i - 1] for i in ids if 1 <= i <= len(INVENTORY)]


@dataclass
class RecognizerConfig:
    n_mels: int = 80
    d_model: int = 128
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    ff: int = 256
    kernel_size: int = 15
    bnf_dim: int = 64
    vocab: int = len(INVENTORY)
    subsampling: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder block")
        if self.subsampling < 1 or self.subsampling & (self.subsampling - 1):
            raise ValueError("subsampling must be a power of two")

    @property
    def sos_eos(self) -> int:
        return self.vocab + 1


@dataclass
class RecognitionBatch:
    features: list  # (T_i, n_mels) arrays
    transcripts: list  # symbol sequences
    speech_types: list = field(default_factory=list)

    def __post_init__(self):
        if not self.speech_types:
            self.speech_types = [SpeechType.TYPICAL] * len(self.features)
        self.speech_types = [SpeechType(s) for s in self.speech_types]
        if not (len(self.features) == len(self.transcripts) == len(self.speech_types)):
            raise ShapeError("features, transcripts and speech_types differ in length")

    def __len__(self):
        return len(self.features)

    def subset(self, idx) -> "RecognitionBatch":
        return RecognitionBatch(
            [self.features[i] for i in idx], [self.transcripts[i] for i in idx], [self.speech_types[i] for i in idx]
        )

    def el_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.speech_types) if s == SpeechType.EL]

    def typical_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.speech_types) if s == SpeechType.TYPICAL]


@dataclass
class RecognizerOutput:
    ctc_logits: torch.Tensor  # (B, T', V + 1)
    enc_lengths: torch.Tensor  # (B,)
    sid_logits: torch.Tensor  # (B,)
    bnf: list  # per-utterance (T'_i, bnf_dim) tensors
    attn_logits: torch.Tensor | None = None  # (B, L + 1, V + 2), teacher forced
    targets: list | None = None  # token id lists


def subsampled_length(n: int, factor: int) -> int:
    while factor > 1:
        n = (n + 1) // 2
        factor //= 2
    return n


class Recognizer(nn.Module):
    def __init__(self, config: RecognizerConfig = RecognizerConfig()):
        super().__init__()
        self.config = config
        c = config
        self.register_buffer("feat_mean", torch.zeros(c.n_mels))
        self.register_buffer("feat_std", torch.ones(c.n_mels))
        self.register_buffer("norm_fitted", torch.zeros((), dtype=torch.bool))
        convs = []
        in_ch = c.n_mels
        for _ in range(int(np.log2(c.subsampling))):
            convs.append(nn.Conv1d(in_ch, c.d_model, 3, stride=2, padding=1))
            in_ch = c.d_model
        self.subsample = nn.ModuleList(convs)
        self.input_proj = nn.Linear(in_ch, c.d_model)
        self.pos = ScaledPositionalEncoding(c.d_model, c.dropout)
        self.encoder = nn.ModuleList(
            [ConformerBlock(c.d_model, c.heads, c.ff, c.kernel_size, c.dropout) for _ in range(c.enc_layers)]
        )
        self.bnf_proj = nn.Linear(c.d_model, c.bnf_dim)
        self.ctc_head = nn.Linear(c.bnf_dim, c.vocab + 1)
        self.sid_head = nn.Linear(c.d_model, 1)
        self.memory_proj = nn.Linear(c.bnf_dim, c.d_model)
        self.embed = nn.Embedding(c.vocab + 2, c.d_model)
        self.dec_pos = ScaledPositionalEncoding(c.d_model, c.dropout)
        self.decoder = nn.ModuleList([DecoderLayer(c.d_model, c.heads, c.ff, c.dropout) for _ in range(c.dec_layers)])
        self.dec_norm = nn.LayerNorm(c.d_model)
        self.attn_head = nn.Linear(c.d_model, c.vocab + 2)

    # -- normalisation -------------------------------------------------
    def set_normalizer(self, feats) -> None:
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in feats], axis=0)
        self.feat_mean.copy_(torch.as_tensor(stacked.mean(0), dtype=self.feat_mean.dtype))
        self.feat_std.copy_(torch.as_tensor(stacked.std(0) + 1e-5, dtype=self.feat_std.dtype))
        self.norm_fitted.fill_(True)

    def _dtype(self):
        return self.feat_mean.dtype

    def pad_features(self, features) -> tuple[torch.Tensor, torch.Tensor]:
        for f in features:
            if np.ndim(f) != 2 or np.shape(f)[1] != self.config.n_mels:
                raise ShapeError(f"expected (T, {self.config.n_mels}) features, got {np.shape(f)}")
        return pad_list(features, dtype=self._dtype())

    # -- encoder -------------------------------------------------------
    def encode(self, feats: torch.Tensor, lengths: torch.Tensor):
        """Return (encoder states, BNFs, subsampled lengths)."""
        if feats.shape[-1] != self.config.n_mels:
            raise ShapeError(f"feature dim {feats.shape[-1]} != {self.config.n_mels}")
        valid = lengths_to_mask(lengths, feats.shape[1])
        x = (feats - self.feat_mean) / self.feat_std
        x = x * valid[..., None].to(x.dtype)
        x = x.transpose(1, 2)
        for conv in self.subsample:
            x = torch.nn.functional.gelu(conv(x))
            lengths = (lengths + 1) // 2
            valid = lengths_to_mask(lengths, x.shape[2])
            x = x * valid[:, None, :].to(x.dtype)
        x = self.pos(self.input_proj(x.transpose(1, 2)))
        for block in self.encoder:
            x = block(x, valid)
            x = x * valid[..., None].to(x.dtype)
        bnf = self.bnf_proj(x) * valid[..., None].to(x.dtype)
        return x, bnf, lengths

    def sid_from_encoder(self, enc: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        valid = lengths_to_mask(lengths, enc.shape[1])[..., None].to(enc.dtype)
        pooled = (enc * valid).sum(1) / lengths[:, None].to(enc.dtype)
        return self.sid_head(pooled).squeeze(-1)

    # -- attention decoder ---------------------------------------------
    def decoder_logits(self, tokens: torch.Tensor, bnf: torch.Tensor, enc_lengths: torch.Tensor, token_lengths=None):
        """Logits for every prefix position of ``tokens`` (B, L)."""
        b, l = tokens.shape
        memory = self.memory_proj(bnf)
        cross = lengths_to_mask(enc_lengths, bnf.shape[1])[:, None, :]
        self_mask = causal_mask(l, tokens.device)[None]
        if token_lengths is not None:
            self_mask = self_mask & lengths_to_mask(token_lengths, l)[:, None, :]
        x = self.dec_pos(self.embed(tokens))
        for layer in self.decoder:
            x = layer(x, memory, self_mask, cross)
        return self.attn_head(self.dec_norm(x))

    def forward(self, batch: RecognitionBatch, teacher_forcing: bool = True) -> RecognizerOutput:
        if len(batch) == 0:
            raise EmptyBatch("empty recognition batch")
        feats, lengths = self.pad_features(batch.features)
        enc, bnf, enc_lengths = self.encode(feats, lengths)
        out = RecognizerOutput(
            ctc_logits=self.ctc_head(bnf),
            enc_lengths=enc_lengths,
            sid_logits=self.sid_from_encoder(enc, enc_lengths),
            bnf=[bnf[i, : enc_lengths[i]] for i in range(len(batch))],
        )
        if teacher_forcing:
            targets = [encode_symbols(t) for t in batch.transcripts]
            sos = self.config.sos_eos
            dec_in, dec_len = pad_list([[sos] + t for t in targets], pad_value=sos, dtype=torch.long)
            out.attn_logits = self.decoder_logits(dec_in, bnf, enc_lengths, dec_len)
            out.targets = targets
        return out

    # -- persistence ---------------------------------------------------
    def save(self, path, meta=None):
        return checkpoint.save(path, "recognizer", asdict(self.config), self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Recognizer":
        payload = checkpoint.load(path, "recognizer")
        model = cls(RecognizerConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
        model.meta = payload["meta"]
        model.eval()
        return model

    def clone(self) -> "Recognizer":
        return copy.deepcopy(self)


def extract_bnf(model: Recognizer, features) -> np.ndarray:
    """BNF sequence (T', bnf_dim) for one utterance's mel frames."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        feats, lengths = model.pad_features([features])
        _, bnf, enc_len = model.encode(feats, lengths)
    model.train(was_training)
    return bnf[0, : enc_len[0]].cpu().numpy().astype(np.float32)
