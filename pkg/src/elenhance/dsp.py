"""Frame-level feature extraction and Griffin-Lim inversion.

All analysis shares one framing: Hann-windowed frames of ``frame_length``
samples every ``frame_shift`` samples, no padding, so a waveform of N samples
yields ``floor((N - frame_length) / frame_shift) + 1`` frames for every
extractor (mel, mel-cepstrum and F0 alike).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import InputTooShort, InvalidInput


@dataclass(frozen=True)
class DspParams:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10
    mcep_order: int = 24
    mcep_alpha: float = 0.42
    f0_min: float = 50.0
    f0_max: float = 600.0
    f0_window_ms: float = 40.0
    voicing_threshold: float = 0.3
    octave_cost: float = 0.04
    silence_rms: float = 1e-4

    @property
    def frame_length(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def f0_window(self) -> int:
        return int(round(self.sample_rate * self.f0_window_ms / 1000.0))

    def with_shift(self, frame_shift_ms: float) -> "DspParams":
        return DspParams(**{**self.__dict__, "frame_shift_ms": frame_shift_ms})


DEFAULT_PARAMS = DspParams()


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels) natural-log mel magnitudes
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    n_mels: int = 80
    sample_rate: int = 16000

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class McepSequence:
    frames: np.ndarray  # (T, D + 1), c0..cD
    alpha: float = 0.42

    @property
    def order(self) -> int:
        return int(self.frames.shape[1]) - 1


@dataclass
class F0Track:
    f0_hz: np.ndarray  # (T,), 0 where unvoiced
    voiced: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0_hz.shape != self.voiced.shape:
            raise InvalidInput("f0 and voicing mask differ in length")
        if np.any((self.f0_hz > 0) != self.voiced):
            raise InvalidInput("f0 > 0 must coincide with the voicing mask")


def num_frames(n_samples: int, params: DspParams = DEFAULT_PARAMS) -> int:
    if n_samples < params.frame_length:
        return 0
    return (n_samples - params.frame_length) // params.frame_shift + 1


def frame_signal(x: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInput("expected a mono waveform")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("waveform contains non-finite samples")
    n = num_frames(len(x), params)
    if n == 0:
        raise InputTooShort(
            f"waveform of {len(x)} samples is shorter than one frame ({params.frame_length})"
        )
    return np.lib.stride_tricks.sliding_window_view(x, params.frame_length)[:: params.frame_shift][:n]


@functools.lru_cache(maxsize=16)
def _window(length: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def magnitude_spectrogram(x: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    frames = frame_signal(x, params) * _window(params.frame_length)
    return np.abs(np.fft.rfft(frames, n=params.n_fft, axis=1))


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular, area-normalised filters of shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= (2.0 / (upper - lower))
    fb.setflags(write=False)
    return fb


def _fb(params: DspParams) -> np.ndarray:
    return mel_filterbank(params.sample_rate, params.n_fft, params.n_mels, params.fmin, params.fmax)


def mel_spectrogram(waveform: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> MelSpectrogram:
    mag = magnitude_spectrogram(waveform, params)
    mel = mag @ _fb(params).T
    frames = np.log(np.maximum(mel, params.log_floor))
    return MelSpectrogram(
        frames=frames,
        frame_shift_ms=params.frame_shift_ms,
        frame_length_ms=params.frame_length_ms,
        n_mels=params.n_mels,
        sample_rate=params.sample_rate,
    )


def _inverse_warp(omega: np.ndarray, alpha: float) -> np.ndarray:
    # all-pass frequency warping with coefficient -alpha undoes warping with +alpha
    a = -alpha
    return omega + 2.0 * np.arctan(a * np.sin(omega) / (1.0 - a * np.cos(omega)))


@functools.lru_cache(maxsize=8)
def _mcep_matrix(n_fft: int, order: int, alpha: float) -> np.ndarray:
    """Linear map from a log-magnitude spectrum (n_fft//2+1 bins) to c0..cD."""
    k = n_fft // 2
    warped = np.pi * np.arange(k + 1) / k
    linear = _inverse_warp(warped, alpha)
    # linear interpolation of the log spectrum at the unwarped frequencies
    pos = np.clip(linear / np.pi * k, 0.0, k)
    lo = np.minimum(np.floor(pos).astype(int), k - 1)
    frac = pos - lo
    interp = np.zeros((k + 1, k + 1))
    interp[np.arange(k + 1), lo] = 1.0 - frac
    interp[np.arange(k + 1), lo + 1] += frac
    # trapezoidal cosine transform over [0, pi] is exact for flat spectra
    weights = np.ones(k + 1)
    weights[0] = weights[-1] = 0.5
    m = np.arange(order + 1)[:, None]
    cos = np.cos(m * warped[None, :]) * weights[None, :] / k
    cos[1:] *= 2.0  # causal (minimum-phase) cepstrum convention
    mat = cos @ interp
    mat.setflags(write=False)
    return mat


def mel_cepstrum(waveform: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> McepSequence:
    mag = magnitude_spectrogram(waveform, params)
    log_spec = np.log(np.maximum(mag, params.log_floor))
    mat = _mcep_matrix(params.n_fft, params.mcep_order, params.mcep_alpha)
    return McepSequence(frames=log_spec @ mat.T, alpha=params.mcep_alpha)


def _normalized_autocorr(seg: np.ndarray, max_lag: int) -> np.ndarray:
    w = len(seg)
    nfft = 1 << int(np.ceil(np.log2(2 * w)))
    spec = np.fft.rfft(seg, nfft)
    ac = np.fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1]
    cs = np.concatenate([[0.0], np.cumsum(seg * seg)])
    lags = np.arange(max_lag + 1)
    e_head = cs[w - lags]
    e_tail = cs[w] - cs[lags]
    denom = np.sqrt(e_head * e_tail)
    return np.where(denom > 0, ac / np.maximum(denom, 1e-300), 0.0)


def extract_f0(waveform: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> F0Track:
    """Normalised-autocorrelation pitch tracker on the shared frame grid.

    Each frame's analysis window (``f0_window_ms`` long) is centred on the
    centre of the corresponding mel frame and zero-padded at the edges.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInput("expected a mono waveform")
    if len(x) < 2 * params.frame_length:
        raise InputTooShort(f"need at least {2 * params.frame_length} samples for pitch analysis")
    n = num_frames(len(x), params)
    sr = params.sample_rate
    win = params.f0_window
    half = win // 2
    min_lag = int(np.ceil(sr / params.f0_max))
    max_lag = int(np.floor(sr / params.f0_min))
    padded = np.concatenate([np.zeros(half), x, np.zeros(half)])
    centers = np.arange(n) * params.frame_shift + params.frame_length // 2
    f0 = np.zeros(n)
    for t, c in enumerate(centers):
        seg = padded[c : c + win]
        if np.sqrt(np.mean(seg[half // 2 : half // 2 + half] ** 2)) < params.silence_rms:
            continue
        seg = seg - seg.mean()
        r = _normalized_autocorr(seg, max_lag)
        search = r[min_lag : max_lag + 1]
        best = float(search.max())
        if best < params.voicing_threshold:
            continue
        # local peaks scored with a small per-octave penalty on long lags, which
        # resolves the near-tie between the period and its multiples
        peaks = np.flatnonzero((search[1:-1] >= search[:-2]) & (search[1:-1] >= search[2:])) + 1
        if len(peaks) == 0:
            peaks = np.array([int(np.argmax(search))])
        lags = peaks + min_lag
        score = search[peaks] - params.octave_cost * np.log2(lags / min_lag)
        i = int(peaks[np.argmax(score)])
        lag = float(i + min_lag)
        if 0 < i < len(search) - 1:
            a, b, g = search[i - 1], search[i], search[i + 1]
            den = a - 2 * b + g
            if den < 0:
                lag += 0.5 * (a - g) / den
        hz = sr / lag
        if params.f0_min <= hz <= params.f0_max:
            f0[t] = hz
    return F0Track(f0_hz=f0, voiced=f0 > 0)


def stft(x: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    frames = frame_signal(x, params) * _window(params.frame_length)
    return np.fft.rfft(frames, n=params.n_fft, axis=1)


def istft(spec: np.ndarray, params: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft` (least-squares estimate)."""
    length, shift = params.frame_length, params.frame_shift
    win = _window(length)
    frames = np.fft.irfft(spec, n=params.n_fft, axis=1)[:, :length] * win
    n = spec.shape[0]
    out = np.zeros((n - 1) * shift + length)
    norm = np.zeros_like(out)
    for t in range(n):
        out[t * shift : t * shift + length] += frames[t]
        norm[t * shift : t * shift + length] += win * win
    return out / np.maximum(norm, 1e-8)


@functools.lru_cache(maxsize=8)
def _fb_pinv(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float | None) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax))


def mel_to_magnitude(mel: MelSpectrogram, params: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    frames = np.asarray(mel.frames, dtype=np.float64)
    lin = np.exp(frames)
    lin[frames <= np.log(params.log_floor) + 1e-9] = 0.0
    pinv = _fb_pinv(params.sample_rate, params.n_fft, params.n_mels, params.fmin, params.fmax)
    return np.maximum(lin @ pinv.T, 0.0)


def griffin_lim(mel: MelSpectrogram, iterations: int = 60, params: DspParams = DEFAULT_PARAMS, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram to a waveform.

    The magnitude is recovered with the filterbank pseudo-inverse (clipped at
    zero), then phase is estimated by alternating projections starting from
    a seeded random phase.
    """
    if iterations < 1:
        raise InvalidInput("iterations must be >= 1")
    frames = np.asarray(mel.frames)
    if frames.ndim != 2 or frames.shape[1] != params.n_mels or frames.shape[0] < 1:
        raise InvalidInput(f"mel must be (T, {params.n_mels})")
    if not np.all(np.isfinite(frames)):
        raise InvalidInput("mel contains non-finite values")
    mag = mel_to_magnitude(mel, params)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, params)
    for _ in range(iterations):
        rebuilt = stft(x, params)
        phase = np.exp(1j * np.angle(rebuilt))
        x = istft(mag * phase, params)
    return x
