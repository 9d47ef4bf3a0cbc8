"""System-level evaluation: converted WAVs vs parallel typical references."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import dsp
from ..corpus import Manifest, read_wav
from ..errors import InsufficientVoicing, IoError
from ..recognition.decode import decode
from ..recognition.model import Recognizer
from .metrics import corpus_cer, dtw_align, f0_metrics, mcd

COLUMNS = ("system_id", "inputs", "outputs", "pretraining", "mcd_db", "cer_pct", "f0_rmse", "f0_corr")


@dataclass
class EvalRow:
    system_id: str
    inputs: str
    outputs: str
    pretraining: str
    mcd_db: float
    cer_pct: float
    f0_rmse: float  # cents
    f0_corr: float
    n_utterances: int = 0
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        vals = (self.mcd_db, self.cer_pct, self.f0_rmse, self.f0_corr)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"{self.system_id}: non-finite metric in {vals}")
        if self.cer_pct < 0 or self.mcd_db < 0 or not -1.0 <= self.f0_corr <= 1.0:
            raise ValueError(f"{self.system_id}: metric out of range")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        row.check()
        self.rows = [r for r in self.rows if r.system_id != row.system_id] + [row]

    def to_dict(self) -> dict:
        return {"f0_rmse_unit": "cents", "rows": [asdict(r) for r in self.rows]}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read report {path}: {exc}") from exc
        return cls([EvalRow(**r) for r in data["rows"]])

    def table(self) -> str:
        header = ["System", "Inputs", "Outputs", "Pretraining", "MCD [dB]", "CER [%]", "F0 RMSE [cents]", "F0 CORR"]
        body = [
            [r.system_id, r.inputs, r.outputs, r.pretraining, f"{r.mcd_db:.2f}", f"{r.cer_pct:.1f}", f"{r.f0_rmse:.1f}", f"{r.f0_corr:.3f}"]
            for r in self.rows
        ]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() for row in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def utterance_metrics(converted: np.ndarray, reference: np.ndarray, params: dsp.DspParams = dsp.DEFAULT_PARAMS) -> dict:
    """MCD and log-F0 statistics of one converted waveform against its reference."""
    a = dsp.mel_cepstrum(converted, params).frames
    b = dsp.mel_cepstrum(reference, params).frames
    path, _ = dtw_align(a, b)
    out = {"mcd": mcd(a, b, path)}
    try:
        f = f0_metrics(dsp.extract_f0(converted, params), dsp.extract_f0(reference, params), path)
        out.update(f0_rmse=f["rmse"], f0_corr=f["corr"])
    except InsufficientVoicing:
        out.update(f0_rmse=float("nan"), f0_corr=float("nan"))
    return out


def evaluate_outputs(
    outputs: dict,
    manifest: Manifest,
    recognizer: Recognizer,
    system_id: str,
    inputs: str = "",
    outputs_type: str = "",
    pretraining: str = "",
    params: dsp.DspParams = dsp.DEFAULT_PARAMS,
) -> EvalRow:
    """``outputs`` maps test utterance id to a converted waveform or WAV path.

    Each test entry is scored against its parallel typical reference (or
    itself when it has none). CER uses ``recognizer`` (the typical-speech model).
    """
    index = manifest.by_id()
    pairs, per_utt = [], []
    for uid, out in outputs.items():
        entry = index[uid]
        ref_entry = index[entry.parallel_id] if entry.parallel_id else entry
        if isinstance(out, (str, Path)):
            if not Path(out).exists():
                raise IoError(f"converted output missing for {uid}: {out}")
            wave, _ = read_wav(out)
        else:
            wave = np.asarray(out, dtype=np.float64)
        ref = manifest.load_audio(ref_entry)
        mel = dsp.mel_spectrogram(wave, params).frames.astype(np.float32)
        pairs.append((ref_entry.transcript, decode(recognizer, mel, "greedy")))
        per_utt.append(utterance_metrics(wave, ref, params))
    if not per_utt:
        raise IoError(f"{system_id}: no converted outputs to evaluate")
    rmse = [u["f0_rmse"] for u in per_utt if math.isfinite(u["f0_rmse"])]
    corr = [u["f0_corr"] for u in per_utt if math.isfinite(u["f0_corr"])]
    return EvalRow(
        system_id=system_id,
        inputs=inputs,
        outputs=outputs_type,
        pretraining=pretraining,
        mcd_db=float(np.mean([u["mcd"] for u in per_utt])),
        cer_pct=100.0 * corpus_cer(pairs),
        f0_rmse=float(np.mean(rmse)) if rmse else 0.0,
        f0_corr=float(np.mean(corr)) if corr else 0.0,
        n_utterances=len(per_utt),
        extra={"f0_voiced_utterances": len(rmse)},
    )


def collect_outputs(out_dir, manifest: Manifest) -> dict:
    """Map every entry of ``manifest`` to ``out_dir/<id>.wav``; IoError names the first missing file."""
    out_dir = Path(out_dir)
    result = {}
    for e in manifest:
        p = out_dir / f"{e.utterance_id}.wav"
        if not p.exists():
            raise IoError(f"converted output missing for {e.utterance_id}: {p}")
        result[e.utterance_id] = p
    return result
