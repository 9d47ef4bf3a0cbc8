"""Feature dump format and a per-manifest feature cache.

Dump layout (all little-endian)::

    magic   4 bytes  b"ELMX"
    version uint8    1
    dtype   uint8    1=float32 2=float64 3=int32 4=int64
    ndim    uint8
    pad     uint8    0
    shape   ndim x uint32
    data    row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import Manifest
from .errors import ConfigError, IoError

MAGIC = b"ELMX"
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i4", 4: "<i8"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def write_matrix(path, array: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype.kind == "f" and arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float32)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _CODES.get(le.dtype.str)
    if code is None:
        raise ConfigError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BBBB", 1, code, arr.ndim, 0) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + np.ascontiguousarray(le).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise IoError(f"{path}: not a feature dump")
    version, code, ndim, _ = struct.unpack("<BBBB", raw[4:8])
    if version != 1 or code not in _DTYPES:
        raise IoError(f"{path}: unsupported header (version {version}, dtype {code})")
    shape = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_DTYPES[code], offset=8 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise IoError(f"{path}: truncated payload")
    return data.reshape(shape).astype(np.dtype(_DTYPES[code]).newbyteorder("="))


class FeatureStore:
    """Lazily computed, memoised features for the utterances of a manifest."""

    def __init__(self, manifest: Manifest, params: dsp.DspParams = dsp.DEFAULT_PARAMS):
        self.manifest = manifest
        self.params = params
        self._index = manifest.by_id()
        self._cache: dict[tuple[str, str], object] = {}

    def entry(self, uid: str):
        try:
            return self._index[uid]
        except KeyError:
            raise ConfigError(f"utterance {uid} is not in the manifest") from None

    def waveform(self, uid: str) -> np.ndarray:
        key = ("wav", uid)
        if key not in self._cache:
            self._cache[key] = self.manifest.load_audio(self.entry(uid))
        return self._cache[key]

    def _memo(self, kind, uid, fn):
        key = (kind, uid)
        if key not in self._cache:
            self._cache[key] = fn(self.waveform(uid))
        return self._cache[key]

    def mel(self, uid: str) -> np.ndarray:
        return self._memo("mel", uid, lambda w: dsp.mel_spectrogram(w, self.params).frames.astype(np.float32))

    def mcep(self, uid: str) -> np.ndarray:
        return self._memo("mcep", uid, lambda w: dsp.mel_cepstrum(w, self.params).frames)

    def f0(self, uid: str) -> dsp.F0Track:
        return self._memo("f0", uid, lambda w: dsp.extract_f0(w, self.params))

    def drop_waveforms(self) -> None:
        for key in [k for k in self._cache if k[0] == "wav"]:
            del self._cache[key]
