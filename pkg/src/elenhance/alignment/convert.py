"""Greedy autoregressive conversion with a stop flag."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError, EmptyInput
from .model import AlignmentModel


@dataclass
class ConversionResult:
    frames: np.ndarray  # (T_out, out_dim) in feature space; unit rows sum to 1
    truncated: bool
    steps: int
    out_type: str

    def __len__(self):
        return len(self.frames)


def renormalize_units(frames: np.ndarray) -> np.ndarray:
    """Clip to nonnegative and rescale rows to sum to 1 (uniform if a row is all zero)."""
    f = np.clip(np.asarray(frames, dtype=np.float64), 0.0, None)
    sums = f.sum(1, keepdims=True)
    uniform = np.full_like(f, 1.0 / f.shape[1])
    return np.where(sums > 0, f / np.where(sums > 0, sums, 1.0), uniform)


def convert(model: AlignmentModel, src, max_frames: int | None = None, stop_threshold: float = 0.5) -> ConversionResult:
    """Decode an output sequence for one source sequence.

    ``max_frames`` counts output frames and defaults to three times the
    source length. Hitting it sets ``truncated`` rather than raising.
    """
    src = np.asarray(src)
    if src.ndim != 2 or len(src) == 0:
        raise EmptyInput("conversion needs a non-empty (T, D) source sequence")
    c = model.config
    max_frames = 3 * len(src) if max_frames is None else int(max_frames)
    if max_frames < 1:
        raise ConfigError("max_frames must be positive")
    max_steps = -(-max_frames // c.reduction)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x, x_len = model.prepare_inputs([src])
            memory = model.encode(x, x_len)
            dec_in = torch.zeros(1, 1, c.out_dim * c.reduction)
            outputs = []
            stopped = False
            for _ in range(max_steps):
                frames, stop, _ = model.decode_steps(dec_in, memory, x_len)
                last = frames[:, -c.reduction :]
                outputs.append(last)
                if torch.sigmoid(stop[0, -1]) > stop_threshold:
                    stopped = True
                    break
                dec_in = torch.cat([dec_in, model.feedback(last).reshape(1, 1, -1)], dim=1)
            y = model.to_features(torch.cat(outputs, dim=1))[0].numpy().astype(np.float64)
    finally:
        model.train(was_training)
    truncated = not stopped or len(y) > max_frames
    y = y[:max_frames]
    if c.out_type == "units":
        y = renormalize_units(y)
    return ConversionResult(y, truncated, len(outputs), c.out_type)
