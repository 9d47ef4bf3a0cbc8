"""Mel-to-waveform back ends."""
from __future__ import annotations

import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .. import dsp
from ..corpus import read_wav
from ..errors import ConfigError, IoError
from ..features import write_matrix


class GriffinLimVocoder:
    name = "griffin_lim"

    def __init__(self, iterations: int = 60, params: dsp.DspParams = dsp.DEFAULT_PARAMS):
        self.iterations = iterations
        self.params = params

    def __call__(self, mel_frames: np.ndarray, seed: int = 0) -> np.ndarray:
        mel = dsp.MelSpectrogram(
            np.asarray(mel_frames, dtype=np.float64),
            self.params.frame_shift_ms,
            self.params.frame_length_ms,
            self.params.n_mels,
            self.params.sample_rate,
        )
        return dsp.griffin_lim(mel, self.iterations, self.params, seed=seed)


class ExternalVocoder:
    """Runs a command on a mel dump; ``{mel}`` and ``{wav}`` in the template are substituted."""

    name = "external"

    def __init__(self, command: str):
        if "{mel}" not in command or "{wav}" not in command:
            raise ConfigError("external vocoder command needs {mel} and {wav} placeholders")
        self.command = command

    def __call__(self, mel_frames: np.ndarray, seed: int = 0) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            mel_path, wav_path = Path(tmp) / "mel.mat", Path(tmp) / "out.wav"
            write_matrix(mel_path, np.asarray(mel_frames, dtype=np.float32))
            cmd = self.command.format(mel=shlex.quote(str(mel_path)), wav=shlex.quote(str(wav_path)))
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
            if proc.returncode != 0 or not wav_path.exists():
                raise IoError(f"external vocoder failed ({proc.returncode}): {proc.stderr.strip()[:200]}")
            wave, _ = read_wav(wav_path)
        return wave


def make_vocoder(spec: dict | None = None):
    spec = dict(spec or {})
    kind = spec.pop("kind", "griffin_lim")
    if kind == "griffin_lim":
        return GriffinLimVocoder(**spec)
    if kind == "external":
        return ExternalVocoder(**spec)
    raise ConfigError(f"unknown vocoder {kind!r}")
