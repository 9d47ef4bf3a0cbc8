"""Soft content units: k-means codebook over mel-cepstra plus a file-backed adapter."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import Manifest, SpeechType
from .errors import ConfigError, EmptyInput, IoError, ShapeError
from .features import read_matrix, write_matrix

logger = logging.getLogger(__name__)

UNIT_SHIFT_MS = 20.0
DEFAULT_K = 64


@dataclass
class UnitSequence:
    frames: np.ndarray  # (T, U), rows sum to 1
    frame_shift_ms: float = UNIT_SHIFT_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"unit frames must be 2-D, got shape {self.frames.shape}")

    def __len__(self):
        return len(self.frames)


@dataclass
class UnitCodebook:
    centroids: np.ndarray  # (K, F) over standardised c1..cD
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,)
    tau: float = 1.0
    frame_shift_ms: float = UNIT_SHIFT_MS
    inertia: float = float("nan")

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if not np.all(np.isfinite(self.centroids)):
            raise ConfigError("codebook centroids must be finite")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def size(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def dsp_params(self, base: dsp.DspParams = dsp.DEFAULT_PARAMS) -> dsp.DspParams:
        return base.with_shift(self.frame_shift_ms)

    def soft_assign(self, feats: np.ndarray) -> np.ndarray:
        """softmax(-||x - c_k|| / tau) for each row of standardised ``feats``."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ShapeError(f"expected (T, {self.dim}) features, got {feats.shape}")
        z = (feats - self.mean) / self.std
        d2 = (z**2).sum(1)[:, None] - 2.0 * z @ self.centroids.T + (self.centroids**2).sum(1)[None, :]
        logits = -np.sqrt(np.maximum(d2, 0.0)) / self.tau
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(1, keepdims=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(
            tmp,
            centroids=self.centroids,
            mean=self.mean,
            std=self.std,
            tau=np.float64(self.tau),
            frame_shift_ms=np.float64(self.frame_shift_ms),
            inertia=np.float64(self.inertia),
        )
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "UnitCodebook":
        try:
            with np.load(Path(path)) as z:
                return cls(
                    z["centroids"], z["mean"], z["std"], float(z["tau"]), float(z["frame_shift_ms"]), float(z["inertia"])
                )
        except (OSError, KeyError, ValueError) as exc:
            raise IoError(f"cannot read codebook {path}: {exc}") from exc


def base_features(waveform: np.ndarray, params: dsp.DspParams) -> np.ndarray:
    """Mel-cepstra without c0, so overall gain does not reach the units."""
    return dsp.mel_cepstrum(waveform, params).frames[:, 1:]


def fit_unit_extractor(
    manifest: Manifest,
    k: int = DEFAULT_K,
    seed: int = 0,
    tau: float = 1.0,
    frame_shift_ms: float = UNIT_SHIFT_MS,
    base: dsp.DspParams = dsp.DEFAULT_PARAMS,
    max_frames: int = 60000,
) -> UnitCodebook:
    """K-means over typical-speech cepstral frames of ``manifest``."""
    from sklearn.cluster import KMeans

    params = base.with_shift(frame_shift_ms)
    typical = [e for e in manifest if e.speech_type == SpeechType.TYPICAL.value]
    if not typical:
        raise ConfigError("unit extractor needs typical utterances")
    feats = np.concatenate([base_features(manifest.load_audio(e), params) for e in typical])
    if k < 1 or k > len(feats):
        raise ConfigError(f"K={k} but only {len(feats)} frames available")
    if len(feats) > max_frames:
        keep = np.random.default_rng(seed).choice(len(feats), max_frames, replace=False)
        feats = feats[np.sort(keep)]
    mean, std = feats.mean(0), feats.std(0) + 1e-8
    z = (feats - mean) / std
    km = KMeans(n_clusters=k, n_init=1, random_state=seed, max_iter=100).fit(z)
    logger.info("unit k-means K=%d on %d frames: inertia %.2f", k, len(z), km.inertia_)
    return UnitCodebook(km.cluster_centers_, mean, std, tau, frame_shift_ms, float(km.inertia_))


def extract_units(codebook: UnitCodebook, waveform: np.ndarray, base: dsp.DspParams = dsp.DEFAULT_PARAMS) -> UnitSequence:
    """Soft unit sequence of one waveform."""
    feats = base_features(np.asarray(waveform), codebook.dsp_params(base))
    return UnitSequence(codebook.soft_assign(feats), codebook.frame_shift_ms)


def resample_units(frames: np.ndarray, n_out: int) -> np.ndarray:
    """Linear interpolation along time; row sums are preserved."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) == 0 or n_out < 1:
        raise EmptyInput("cannot resample an empty unit sequence")
    if len(frames) == 1:
        return np.repeat(frames, n_out, axis=0)
    pos = np.linspace(0.0, len(frames) - 1, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(frames) - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * frames[lo] + w * frames[hi]


class UnitStore:
    """Unit sequences served from per-utterance matrix dumps.

    ``index`` maps utterance id to a dump path (absolute or relative to
    ``root``). Use :func:`dump_units` to produce one from a codebook.
    """

    def __init__(self, index: dict, root=None, dim: int | None = None, frame_shift_ms: float = UNIT_SHIFT_MS):
        self.index = dict(index)
        self.root = Path(root) if root is not None else None
        self.dim = dim
        self.frame_shift_ms = frame_shift_ms

    def path(self, uid: str) -> Path:
        try:
            p = Path(self.index[uid])
        except KeyError:
            raise IoError(f"no unit dump for utterance {uid}") from None
        return p if p.is_absolute() or self.root is None else self.root / p

    def __getitem__(self, uid: str) -> UnitSequence:
        p = self.path(uid)
        if not p.exists():
            raise IoError(f"unit dump missing for {uid}: {p}")
        frames = read_matrix(p)
        if frames.ndim != 2:
            raise ConfigError(f"{p}: unit dump must be 2-D")
        if self.dim is not None and frames.shape[1] != self.dim:
            raise ConfigError(f"{p}: unit dim {frames.shape[1]} != configured {self.dim}")
        return UnitSequence(frames, self.frame_shift_ms)

    def check_complete(self, manifest: Manifest) -> None:
        for e in manifest:
            if e.utterance_id not in self.index or not self.path(e.utterance_id).exists():
                raise IoError(f"unit dump missing for utterance {e.utterance_id}")


def external_unit_adapter(path, dim: int | None = None, frame_shift_ms: float = UNIT_SHIFT_MS) -> UnitStore:
    """Open a unit dump directory containing ``index.tsv`` (``<utt_id>\\t<file>`` lines)."""
    root = Path(path)
    idx_file = root / "index.tsv"
    try:
        lines = idx_file.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read unit index {idx_file}: {exc}") from exc
    index = {}
    for line in lines:
        if line.strip():
            uid, rel = line.split("\t")
            index[uid] = rel
    return UnitStore(index, root, dim, frame_shift_ms)


def dump_units(codebook: UnitCodebook, manifest: Manifest, out_dir) -> UnitStore:
    out_dir = Path(out_dir)
    index = {}
    for e in manifest:
        rel = f"{e.utterance_id}.mat"
        write_matrix(out_dir / rel, extract_units(codebook, manifest.load_audio(e)).frames)
        index[e.utterance_id] = rel
    (out_dir / "index.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in index.items()))
    return UnitStore(index, out_dir, codebook.size, codebook.frame_shift_ms)
