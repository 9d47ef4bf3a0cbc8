"""Transformer sequence-to-sequence aligner (BNF or mel in, units or mel out).

The decoder emits ``reduction`` output frames plus one stop logit per step.
A symbol encoder sits next to the acoustic encoder for TTS-style pretraining;
both feed the same decoder.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .. import checkpoint
from ..corpus import INVENTORY
from ..errors import ConfigError, ShapeError
from ..layers import DecoderLayer, EncoderLayer, ScaledPositionalEncoding, causal_mask, lengths_to_mask, pad_list

FEATURE_TYPES = ("bnf", "mel", "units")


@dataclass
class AlignmentConfig:
    in_type: str = "bnf"
    out_type: str = "units"
    in_dim: int = 64
    out_dim: int = 64
    input_stack: int = 1  # frames concatenated at the input (mel: 4 -> 40 ms steps)
    reduction: int = 1  # output frames per decoder step
    d_model: int = 128
    heads: int = 4
    enc_layers: int = 6
    dec_layers: int = 6
    ff: int = 512
    dropout: float = 0.1
    prenet_dropout: float = 0.2
    text_vocab: int = len(INVENTORY) + 1
    stop_pos_weight: float = 5.0
    guided_attention: float = 0.0  # weight of the diagonal attention prior; 0 disables
    # unit outputs only: "softmax" emits distributions and takes L1 against the raw soft units;
    # "linear" regresses z-scored units like any other feature
    unit_head: str = "softmax"

    def __post_init__(self):
        if self.in_type not in ("bnf", "mel") or self.out_type not in ("units", "mel"):
            raise ConfigError(f"unsupported feature chain {self.in_type} -> {self.out_type}")
        if self.unit_head not in ("softmax", "linear"):
            raise ConfigError(f"unknown unit_head {self.unit_head!r}")
        if self.input_stack < 1 or self.reduction < 1:
            raise ConfigError("input_stack and reduction must be >= 1")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")

    @classmethod
    def for_types(cls, in_type: str, out_type: str, bnf_dim: int = 64, n_units: int = 64, n_mels: int = 80, **kw):
        dims = {"bnf": bnf_dim, "mel": n_mels, "units": n_units}
        return cls(
            in_type=in_type,
            out_type=out_type,
            in_dim=dims[in_type],
            out_dim=dims[out_type],
            input_stack=4 if in_type == "mel" else 1,
            reduction=2 if out_type == "mel" else 1,
            **kw,
        )


@dataclass
class AlignmentOutput:
    frames: torch.Tensor  # (B, S * r, out_dim) in loss space (see AlignmentModel.loss_targets)
    stop_logits: torch.Tensor  # (B, S)
    steps: torch.Tensor  # (B,) decoder steps
    cross_weights: torch.Tensor | None = None  # (B, heads, S, T_enc) of the last layer


def stack_frames(x: np.ndarray, k: int) -> np.ndarray:
    """Concatenate ``k`` consecutive frames (zero-padding the tail)."""
    if k == 1:
        return x
    t, d = x.shape
    steps = -(-t // k)
    pad = np.zeros((steps * k - t, d), dtype=x.dtype)
    return np.concatenate([x, pad]).reshape(steps, k * d)


class AlignmentModel(nn.Module):
    def __init__(self, config: AlignmentConfig = AlignmentConfig()):
        super().__init__()
        self.config = c = config
        self.register_buffer("in_mean", torch.zeros(c.in_dim))
        self.register_buffer("in_std", torch.ones(c.in_dim))
        self.register_buffer("out_mean", torch.zeros(c.out_dim))
        self.register_buffer("out_std", torch.ones(c.out_dim))
        self.register_buffer("in_fitted", torch.zeros((), dtype=torch.bool))
        self.register_buffer("out_fitted", torch.zeros((), dtype=torch.bool))

        self.encoder_prenet = nn.Sequential(nn.Linear(c.in_dim * c.input_stack, c.d_model), nn.ReLU(), nn.Linear(c.d_model, c.d_model))
        self.encoder_pos = ScaledPositionalEncoding(c.d_model, c.dropout)
        self.encoder = nn.ModuleList([EncoderLayer(c.d_model, c.heads, c.ff, c.dropout) for _ in range(c.enc_layers)])
        self.encoder_norm = nn.LayerNorm(c.d_model)

        self.text_embed = nn.Embedding(c.text_vocab, c.d_model)
        self.text_pos = ScaledPositionalEncoding(c.d_model, c.dropout)
        self.text_encoder = nn.ModuleList([EncoderLayer(c.d_model, c.heads, c.ff, c.dropout) for _ in range(c.enc_layers)])
        self.text_norm = nn.LayerNorm(c.d_model)

        # every decoder-side parameter lives under ``decoder``
        self.decoder = nn.ModuleDict(
            {
                "prenet": nn.Sequential(
                    nn.Linear(c.out_dim * c.reduction, c.d_model),
                    nn.ReLU(),
                    nn.Dropout(c.prenet_dropout),
                    nn.Linear(c.d_model, c.d_model),
                    nn.ReLU(),
                    nn.Dropout(c.prenet_dropout),
                ),
                "pos": ScaledPositionalEncoding(c.d_model, c.dropout),
                "layers": nn.ModuleList([DecoderLayer(c.d_model, c.heads, c.ff, c.dropout) for _ in range(c.dec_layers)]),
                "norm": nn.LayerNorm(c.d_model),
                "out": nn.Linear(c.d_model, c.out_dim * c.reduction),
                "stop": nn.Linear(c.d_model, 1),
            }
        )

    # -- normalisation -------------------------------------------------
    def set_normalizer(self, inputs=None, outputs=None) -> None:
        """Per-dimension standardisation statistics for acoustic inputs and outputs."""
        if inputs is not None:
            x = np.concatenate([np.asarray(a, dtype=np.float64) for a in inputs])
            self.in_mean.copy_(torch.as_tensor(x.mean(0)))
            self.in_std.copy_(torch.as_tensor(x.std(0) + 1e-5))
            self.in_fitted.fill_(True)
        if outputs is not None:
            y = np.concatenate([np.asarray(a, dtype=np.float64) for a in outputs])
            self.out_mean.copy_(torch.as_tensor(y.mean(0)))
            self.out_std.copy_(torch.as_tensor(y.std(0) + 1e-5))
            self.out_fitted.fill_(True)

    def normalize_output(self, y):
        return (torch.as_tensor(np.asarray(y), dtype=torch.float32) - self.out_mean) / self.out_std

    def denormalize_output(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.out_std + self.out_mean

    @property
    def softmax_units(self) -> bool:
        return self.config.out_type == "units" and self.config.unit_head == "softmax"

    def to_features(self, frames: torch.Tensor) -> torch.Tensor:
        """Decoder frames -> feature space."""
        return frames if self.softmax_units else self.denormalize_output(frames)

    def feedback(self, frames: torch.Tensor) -> torch.Tensor:
        """Decoder frames -> the normalised space the prenet reads."""
        return self.normalize_output(frames) if self.softmax_units else frames

    # -- encoders ------------------------------------------------------
    def prepare_inputs(self, seqs) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.config
        stacked = []
        for s in seqs:
            s = np.asarray(s, dtype=np.float32)
            if s.ndim != 2 or s.shape[1] != c.in_dim:
                raise ShapeError(f"expected (T, {c.in_dim}) {c.in_type} frames, got {s.shape}")
            z = (s - self.in_mean.numpy()) / self.in_std.numpy()
            stacked.append(stack_frames(z.astype(np.float32), c.input_stack))
        return pad_list(stacked)

    def encode(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = lengths_to_mask(lengths, x.shape[1])
        h = self.encoder_pos(self.encoder_prenet(x))
        for layer in self.encoder:
            h = layer(h, mask[:, None, :])
        return self.encoder_norm(h)

    def encode_text(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = lengths_to_mask(lengths, tokens.shape[1])
        h = self.text_pos(self.text_embed(tokens))
        for layer in self.text_encoder:
            h = layer(h, mask[:, None, :])
        return self.text_norm(h)

    # -- decoder -------------------------------------------------------
    def decode_steps(self, dec_in: torch.Tensor, memory: torch.Tensor, mem_lengths: torch.Tensor, step_lengths=None, return_weights=False):
        """Teacher-forced decoder pass over (B, S, out_dim * r) step inputs."""
        d = self.decoder
        s = dec_in.shape[1]
        self_mask = causal_mask(s, dec_in.device)[None]
        if step_lengths is not None:
            self_mask = self_mask & lengths_to_mask(step_lengths, s)[:, None, :]
        cross = lengths_to_mask(mem_lengths, memory.shape[1])[:, None, :]
        h = d["pos"](d["prenet"](dec_in))
        weights = None
        for i, layer in enumerate(d["layers"]):
            if return_weights and i == len(d["layers"]) - 1:
                h, weights = layer(h, memory, self_mask, cross, return_weights=True)
            else:
                h = layer(h, memory, self_mask, cross)
        h = d["norm"](h)
        b = h.shape[0]
        frames = d["out"](h).view(b, s * self.config.reduction, self.config.out_dim)
        if self.softmax_units:
            frames = frames.softmax(-1)
        return frames, d["stop"](h).squeeze(-1), weights

    def target_steps(self, targets) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Normalised targets grouped per step: (B, S, r * D), padded frame targets, step counts."""
        r = self.config.reduction
        groups = [stack_frames(self.normalize_output(y).numpy(), r) for y in targets]
        steps, lengths = pad_list(groups)
        return steps, lengths, torch.tensor([len(y) for y in targets])

    def loss_targets(self, targets) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded (B, T, D) targets in the space of ``frames``, plus frame counts."""
        if self.softmax_units:
            padded, lengths = pad_list([np.asarray(y, dtype=np.float32) for y in targets])
            return padded, lengths
        steps, _, lengths = self.target_steps(targets)
        b, s, _ = steps.shape
        return steps.view(b, s * self.config.reduction, self.config.out_dim), lengths

    def teacher_inputs(self, steps: torch.Tensor) -> torch.Tensor:
        """Shift right by one step with a zero <go> frame."""
        go = torch.zeros_like(steps[:, :1])
        return torch.cat([go, steps[:, :-1]], dim=1)

    def forward(self, inputs, targets, text: bool = False, return_weights: bool = False) -> AlignmentOutput:
        if len(inputs) != len(targets):
            raise ShapeError("inputs and targets differ in batch size")
        if not text:
            x, x_len = self.prepare_inputs(inputs)
            memory = self.encode(x, x_len)
        else:
            x, x_len = pad_list([list(t) for t in inputs], pad_value=0, dtype=torch.long)
            memory = self.encode_text(x, x_len)
        steps, step_len, _ = self.target_steps(targets)
        frames, stop, w = self.decode_steps(self.teacher_inputs(steps), memory, x_len, step_len, return_weights)
        out = AlignmentOutput(frames, stop, step_len, w)
        out.memory_lengths = x_len
        return out

    # -- persistence ---------------------------------------------------
    def save(self, path, meta=None):
        return checkpoint.save(path, "aligner", asdict(self.config), self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "AlignmentModel":
        payload = checkpoint.load(path, "aligner")
        model = cls(AlignmentConfig(**payload["config"]))
        model.load_state_dict(payload["state_dict"])
        model.meta = payload["meta"]
        model.eval()
        return model

    def clone(self) -> "AlignmentModel":
        return copy.deepcopy(self)


def stop_labels(step_lengths: torch.Tensor, max_steps: int) -> torch.Tensor:
    """1.0 at each sequence's final step, 0 elsewhere."""
    labels = torch.zeros(len(step_lengths), max_steps)
    labels[torch.arange(len(step_lengths)), step_lengths - 1] = 1.0
    return labels


def guided_attention_loss(weights: torch.Tensor, q_len: torch.Tensor, k_len: torch.Tensor, sigma: float = 0.2) -> torch.Tensor:
    """Penalise attention mass far from the (normalised) diagonal."""
    b, _, s, t = weights.shape
    qs = torch.arange(s, dtype=weights.dtype)[None, :, None] / q_len[:, None, None].to(weights.dtype)
    ks = torch.arange(t, dtype=weights.dtype)[None, None, :] / k_len[:, None, None].to(weights.dtype)
    penalty = 1.0 - torch.exp(-((qs - ks) ** 2) / (2 * sigma**2))
    valid = lengths_to_mask(q_len, s)[:, :, None] & lengths_to_mask(k_len, t)[:, None, :]
    penalty = penalty * valid
    return (weights * penalty[:, None]).sum() / (valid.sum() * weights.shape[1])


def alignment_loss(model: AlignmentModel, inputs, targets, text: bool = False) -> dict:
    """L1 on output frames (z-scored features, or unit distributions) + stop-flag BCE, both weight 1."""
    c = model.config
    want_w = c.guided_attention > 0
    out = model(inputs, targets, text=text, return_weights=want_w)
    tgt, frame_len = model.loss_targets(targets)
    s = out.stop_logits.shape[1]
    fmask = lengths_to_mask(frame_len, tgt.shape[1])[..., None].to(tgt.dtype)
    # distributions: L1 distance per frame (sum over units); features: mean over dims
    per_frame = 1 if model.softmax_units else c.out_dim
    # per-utterance mean, then batch mean, so the loss does not depend on batch order
    per_utt = ((out.frames[:, : tgt.shape[1]] - tgt).abs() * fmask).sum((1, 2)) / (frame_len.to(tgt.dtype) * per_frame)
    l1 = per_utt.mean()
    smask = lengths_to_mask(out.steps, s).to(tgt.dtype)
    labels = stop_labels(out.steps, s)
    bce = F.binary_cross_entropy_with_logits(
        out.stop_logits, labels, pos_weight=torch.tensor(c.stop_pos_weight), reduction="none"
    )
    stop = ((bce * smask).sum(1) / out.steps.to(tgt.dtype)).mean()
    total = l1 + stop
    result = {"total": total, "l1": l1, "stop": stop}
    if want_w:
        ga = guided_attention_loss(out.cross_weights, out.steps, out.memory_lengths)
        result["guided"] = ga
        result["total"] = total + c.guided_attention * ga
    return result
