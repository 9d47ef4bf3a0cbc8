"""One-shot conversion of an EL recording with a trained system."""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch

from .. import dsp
from ..alignment import AlignmentModel, convert
from ..corpus import SAMPLE_RATE, read_wav, write_wav
from ..errors import ElEnhanceError, IoError, StageFailure
from ..recognition.model import Recognizer, extract_bnf
from ..synthesis import DiffusionDecoder, make_vocoder, sample
from ..synthesis.speaker import external_embedding
from .lineage import SystemLineage


class Converter:
    """Holds the loaded models of a lineage so many files can be converted cheaply."""

    def __init__(self, lineage: SystemLineage, verify: bool = True):
        if verify:
            lineage.verify()
        else:
            lineage.check_chain()
        self.lineage = lineage
        self.aligner = AlignmentModel.load(lineage.alignment)
        self.recognizer = Recognizer.load(lineage.recognition) if lineage.recognition else None
        self.decoder = DiffusionDecoder.load(lineage.synthesis) if lineage.synthesis else None
        self.embedding = external_embedding(lineage.embedding) if lineage.embedding else None
        self.vocoder = make_vocoder(lineage.vocoder)

    def _run(self, name: str, timings: dict, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except StageFailure:
            raise
        except ElEnhanceError as exc:
            raise type(exc)(f"{name}: {exc}") from exc
        except Exception as exc:  # noqa: BLE001 - rewrapped with the stage name
            raise StageFailure(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return out

    def convert_wave(self, wave: np.ndarray, seed: int = 0) -> tuple[np.ndarray, dict]:
        torch.manual_seed(seed)
        timings: dict = {}
        mel = self._run("features", timings, lambda: dsp.mel_spectrogram(wave).frames.astype(np.float32))
        src = mel
        if self.lineage.in_type == "bnf":
            src = self._run("recognition", timings, extract_bnf, self.recognizer, mel)
        res = self._run("alignment", timings, convert, self.aligner, src)
        out_mel = res.frames
        if self.lineage.out_type == "units":
            out_mel = self._run(
                "synthesis", timings, sample, self.decoder, res.frames, self.embedding.vector, w=self.lineage.guidance, seed=seed
            )
        out = self._run("vocoder", timings, self.vocoder, out_mel, seed=seed)
        out = np.clip(np.asarray(out, dtype=np.float64), -1.0, 1.0)
        meta = {
            "system_id": self.lineage.system_id,
            "seed": seed,
            "stage_seconds": timings,
            "in_duration_s": len(wave) / SAMPLE_RATE,
            "out_duration_s": len(out) / SAMPLE_RATE,
            "duration_ratio": len(out) / max(len(wave), 1),
            "alignment_steps": res.steps,
            "truncated": bool(res.truncated),
        }
        return out, meta

    def convert_file(self, in_wav, out_wav, seed: int = 0) -> dict:
        wave, sr = read_wav(in_wav)
        if sr != SAMPLE_RATE:
            raise IoError(f"{in_wav}: expected {SAMPLE_RATE} Hz input, got {sr}")
        out, meta = self.convert_wave(wave, seed)
        write_wav(out_wav, out)
        meta.update(input=str(in_wav), output=str(Path(out_wav)))
        return meta


def convert_file(lineage, in_wav, out_wav, seed: int = 0) -> dict:
    """EL WAV in, enhanced WAV out; ``lineage`` is a SystemLineage or a path to one."""
    if not isinstance(lineage, SystemLineage):
        lineage = SystemLineage.load(lineage)
    return Converter(lineage).convert_file(in_wav, out_wav, seed)
