"""Fixed speaker embeddings: a toy cepstral-statistics projection or a file-backed vector."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import dsp
from ..errors import ConfigError, EmptyInput, IoError

EMBED_DIM = 32
_PROJECTION_SEED = 20240415


class EmbeddingSource(str, enum.Enum):
    TOY_STATS = "TOY_STATS"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    source: EmbeddingSource

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ConfigError("speaker embedding must be a finite vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ConfigError("speaker embedding must have unit L2 norm")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return len(self.vector)


def _projection(in_dim: int, out_dim: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def toy_stats_embedding(waveforms, dim: int = EMBED_DIM, params: dsp.DspParams = dsp.DEFAULT_PARAMS) -> SpeakerEmbedding:
    """Unit-norm random projection of the mean and std of c1..cD over all frames."""
    waveforms = list(waveforms)
    if not waveforms:
        raise EmptyInput("speaker embedding needs at least one utterance")
    frames = np.concatenate([dsp.mel_cepstrum(np.asarray(w), params).frames[:, 1:] for w in waveforms])
    stats = np.concatenate([frames.mean(0), frames.std(0)])
    v = stats @ _projection(len(stats), dim)
    return SpeakerEmbedding(v / np.linalg.norm(v), EmbeddingSource.TOY_STATS)


def external_embedding(path, dim: int | None = None) -> SpeakerEmbedding:
    """Load a vector from ``.npy`` or whitespace-separated text and L2-normalise it."""
    path = Path(path)
    try:
        v = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read speaker embedding {path}: {exc}") from exc
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise EmptyInput(f"{path}: empty embedding")
    if dim is not None and v.size != dim:
        raise ConfigError(f"{path}: embedding dim {v.size} != {dim}")
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise ConfigError(f"{path}: embedding cannot be normalised")
    return SpeakerEmbedding(v / norm, EmbeddingSource.EXTERNAL)


def speaker_embedding(utterances, mode: str | EmbeddingSource = EmbeddingSource.TOY_STATS, dim: int = EMBED_DIM, path=None) -> SpeakerEmbedding:
    """``utterances``: waveforms (TOY_STATS). EXTERNAL reads ``path`` instead."""
    mode = EmbeddingSource(mode)
    if mode == EmbeddingSource.EXTERNAL:
        if path is None:
            raise ConfigError("EXTERNAL speaker embedding needs a path")
        return external_embedding(path, dim)
    return toy_stats_embedding(utterances, dim)


def save_embedding(emb: SpeakerEmbedding, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, emb.vector)
    return path
