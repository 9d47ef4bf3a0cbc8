"""Synthetic paired corpus: typical speech, pseudo-EL speech and manifests.

Speech is rendered from a 20-symbol phoneme inventory. Every phoneme is a
formant template; a segment is a sum of harmonics of the speaker's F0 contour
weighted by the (speaker-scaled) formant envelope. Pseudo-EL speech re-renders
the same transcript slower, on a constant-F0 buzz, with random phoneme
substitutions.
"""
from __future__ import annotations

import enum
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import uniform_filter1d

from .errors import ConfigError, EmptyInput, InvalidSpeechType, InvalidSymbol, IoError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

# symbol -> (F1, F2, F3, voiced)
PHONEMES: dict[str, tuple[float, float, float, bool]] = {
    "a": (750, 1250, 2600, True),
    "i": (300, 2250, 3000, True),
    "u": (350, 1350, 2350, True),
    "e": (480, 1900, 2550, True),
    "o": (520, 900, 2450, True),
    "b": (250, 800, 2100, True),
    "p": (400, 700, 2300, False),
    "d": (280, 1650, 2700, True),
    "t": (420, 1800, 3100, False),
    "g": (260, 2050, 2350, True),
    "k": (420, 2150, 2500, False),
    "z": (300, 1500, 3400, True),
    "s": (450, 1600, 3800, False),
    "v": (280, 1100, 2200, True),
    "f": (450, 1150, 3300, False),
    "m": (250, 1000, 2300, True),
    "n": (250, 1400, 2600, True),
    "r": (380, 1350, 1700, True),
    "w": (320, 650, 2200, True),
    "h": (650, 1500, 2800, False),
}
INVENTORY: tuple[str, ...] = tuple(PHONEMES)
VOWELS = ("a", "i", "u", "e", "o")
CONSONANTS = tuple(s for s in INVENTORY if s not in VOWELS)
VOICING_PARTNER = {"b": "p", "p": "b", "d": "t", "t": "d", "g": "k", "k": "g", "z": "s", "s": "z", "v": "f", "f": "v"}
_BANDWIDTHS = (160.0, 200.0, 260.0)
_FORMANT_GAINS = (1.0, 0.55, 0.3)


class SpeechType(str, enum.Enum):
    TYPICAL = "TYPICAL"
    EL = "EL"


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: str
    base_f0: float = 120.0
    formant_scale: float = 1.0
    phone_dur_s: float = 0.07
    f0_depth: float = 0.06
    f0_rate_hz: float = 1.5
    tilt_hz: float = 400.0
    amplitude: float = 0.3


@dataclass(frozen=True)
class ElSimulationParams:
    tempo_factor: float = 1.32
    excitation_f0_hz: float = 100.0
    corruption_prob: float = 0.15
    partner_bias: float = 0.7
    leak: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.tempo_factor < 1.0:
            raise ConfigError("tempo_factor must be >= 1")
        if not 0.0 <= self.corruption_prob < 1.0:
            raise ConfigError("corruption_prob must lie in [0, 1)")


@dataclass
class Utterance:
    id: str
    waveform: np.ndarray
    transcript: tuple[str, ...]
    speech_type: SpeechType
    speaker_id: str
    metadata: dict = field(default_factory=dict)
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.waveform) / self.sample_rate


def stable_seed(*parts) -> int:
    """Order-sensitive 32-bit seed from ints and strings (stable across runs)."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _check_text(text) -> tuple[str, ...]:
    text = tuple(text)
    if not text:
        raise EmptyInput("transcript is empty")
    for s in text:
        if s not in PHONEMES:
            raise InvalidSymbol(f"unknown symbol {s!r}")
    return text


def f0_contour(n_samples: int, speaker: SpeakerParams, seed: int) -> np.ndarray:
    """Per-sample F0 (Hz) of a typical rendering: slow sinusoid plus declination."""
    rng = np.random.default_rng(stable_seed(seed, speaker.speaker_id, "f0"))
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n_samples) / SAMPLE_RATE
    decl = 1.0 - 0.05 * t / max(t[-1], 1e-9) if n_samples > 1 else np.ones(1)
    return speaker.base_f0 * (1.0 + speaker.f0_depth * np.sin(2 * np.pi * speaker.f0_rate_hz * t + phase)) * decl


def _envelope(freqs: np.ndarray, symbol: str, speaker: SpeakerParams, tilt_hz: float) -> np.ndarray:
    f1, f2, f3, _ = PHONEMES[symbol]
    env = np.zeros_like(freqs)
    for fc, bw, g in zip((f1, f2, f3), _BANDWIDTHS, _FORMANT_GAINS):
        fc = fc * speaker.formant_scale
        env += g / (1.0 + ((freqs - fc) / (0.5 * bw * speaker.formant_scale)) ** 2)
    return env / (1.0 + freqs / tilt_hz) + 0.002


def _render(
    symbols: tuple[str, ...],
    seg_lengths: list[int],
    f0: np.ndarray,
    speaker: SpeakerParams,
    rng: np.random.Generator,
    tilt_hz: float,
    leak: float = 0.0,
) -> np.ndarray:
    n = int(sum(seg_lengths))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(7000 // f0.max())
    harmonics = np.arange(1, n_harm + 1)
    gains = np.zeros((n_harm, n))
    noise_gain = np.zeros(n)
    start = 0
    for sym, length in zip(symbols, seg_lengths):
        sl = slice(start, start + length)
        freqs = harmonics[:, None] * f0[None, sl]
        gains[:, sl] = _envelope(freqs, sym, speaker, tilt_hz)
        if not PHONEMES[sym][3]:
            gains[:, sl] *= 0.55
            noise_gain[sl] = 0.06
        start += length
    smooth = max(1, int(0.012 * SAMPLE_RATE))
    gains = uniform_filter1d(gains, smooth, axis=1, mode="nearest")
    noise_gain = uniform_filter1d(noise_gain, smooth, mode="nearest")
    jitter = 1.0 + 0.03 * rng.standard_normal(n_harm)
    wave = np.einsum("hn,hn->n", gains * jitter[:, None], np.sin(harmonics[:, None] * phase[None, :]))
    if leak:
        wave += leak * np.sin(harmonics[:, None] * phase[None, :]).sum(axis=0) / np.sqrt(n_harm)
    noise = np.diff(rng.standard_normal(n + 1))
    wave = wave + noise_gain * noise
    peak = np.max(np.abs(wave)) + 1e-12
    return (speaker.amplitude * wave / peak).astype(np.float64)


def generate_typical(text, speaker: SpeakerParams, seed: int, utt_id: str | None = None) -> Utterance:
    text = _check_text(text)
    rng = np.random.default_rng(stable_seed(seed, speaker.speaker_id, "typ"))
    seg = int(round(speaker.phone_dur_s * SAMPLE_RATE))
    lengths = [seg] * len(text)
    f0 = f0_contour(seg * len(text), speaker, seed)
    wave = _render(text, lengths, f0, speaker, rng, speaker.tilt_hz)
    uid = utt_id or f"{speaker.speaker_id}-{stable_seed(seed, *text):08x}"
    return Utterance(
        id=uid,
        waveform=wave,
        transcript=text,
        speech_type=SpeechType.TYPICAL,
        speaker_id=speaker.speaker_id,
        metadata={"speaker": asdict(speaker), "seed": seed, "rendered": list(text)},
    )


def corrupt_symbols(text, prob: float, rng: np.random.Generator, partner_bias: float = 0.7) -> tuple[str, ...]:
    """Independently substitute each symbol with probability ``prob``.

    Substitutions prefer the voicing partner (b<->p, d<->t, ...) when one exists.
    """
    out = []
    for s in text:
        if rng.random() < prob:
            if s in VOICING_PARTNER and rng.random() < partner_bias:
                s = VOICING_PARTNER[s]
            else:
                others = [o for o in INVENTORY if o != s]
                s = others[int(rng.integers(len(others)))]
        out.append(s)
    return tuple(out)


def simulate_el(src: Utterance, params: ElSimulationParams = ElSimulationParams(), utt_id: str | None = None) -> Utterance:
    """Re-render a typical utterance as pseudo-electrolaryngeal speech."""
    if src.speech_type != SpeechType.TYPICAL:
        raise InvalidSpeechType("simulate_el expects a TYPICAL source utterance")
    speaker = SpeakerParams(**src.metadata["speaker"])
    rng = np.random.default_rng(stable_seed(params.seed, src.id, "el"))
    rendered = corrupt_symbols(src.transcript, params.corruption_prob, rng, params.partner_bias)
    seg = int(round(speaker.phone_dur_s * SAMPLE_RATE * params.tempo_factor))
    lengths = [seg] * len(rendered)
    f0 = np.full(seg * len(rendered), params.excitation_f0_hz)
    # an electrolarynx buzz has a much flatter spectrum than glottal excitation
    wave = _render(rendered, lengths, f0, speaker, rng, tilt_hz=speaker.tilt_hz * 4.0, leak=params.leak)
    return Utterance(
        id=utt_id or f"{src.id}-el",
        waveform=wave,
        transcript=src.transcript,
        speech_type=SpeechType.EL,
        speaker_id=src.speaker_id,
        metadata={
            "speaker": asdict(speaker),
            "source_id": src.id,
            "rendered": list(rendered),
            "el_params": asdict(params),
        },
    )


def write_wav(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(str(path), sample_rate, pcm)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32767.0
    return data.astype(np.float64), int(sr)


# ---------------------------------------------------------------- manifests


SPLITS = ("train", "dev", "test")


@dataclass
class ManifestEntry:
    utterance_id: str
    file_path: str
    transcript: list[str]
    speech_type: str
    speaker_id: str
    split: str
    parallel_id: str | None = None

    @property
    def group(self) -> str:
        return self.utterance_id.split("-", 1)[0]


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path | None = None
    path: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.entries == other.entries

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utterance_id: e for e in self.entries}

    def select(self, group=None, speakers=None, speech_type=None, split=None) -> "Manifest":
        def ok(e: ManifestEntry) -> bool:
            if group is not None and e.group not in _as_set(group):
                return False
            if speakers is not None and e.speaker_id not in _as_set(speakers):
                return False
            if speech_type is not None and e.speech_type not in {SpeechType(s).value for s in _as_set(speech_type)}:
                return False
            if split is not None and e.split not in _as_set(split):
                return False
            return True

        return Manifest([e for e in self.entries if ok(e)], root=self.root, path=self.path)

    def audio_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.file_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_audio(self, entry: ManifestEntry) -> np.ndarray:
        wave, sr = read_wav(self.audio_path(entry))
        if sr != SAMPLE_RATE:
            raise IoError(f"{entry.file_path}: expected {SAMPLE_RATE} Hz, got {sr}")
        return wave

    def load_utterance(self, entry: ManifestEntry) -> Utterance:
        return Utterance(
            id=entry.utterance_id,
            waveform=self.load_audio(entry),
            transcript=tuple(entry.transcript),
            speech_type=SpeechType(entry.speech_type),
            speaker_id=entry.speaker_id,
            metadata={"parallel_id": entry.parallel_id, "split": entry.split},
        )

    def parallel_pairs(self) -> list[tuple[ManifestEntry, ManifestEntry]]:
        """(source, typical target) pairs for every entry carrying a parallel_id."""
        index = self.by_id()
        return [(e, index[e.parallel_id]) for e in self.entries if e.parallel_id and e.parallel_id in index]

    def validate(self) -> list[str]:
        problems = []
        index = self.by_id()
        if len(index) != len(self.entries):
            problems.append("duplicate utterance ids")
        for e in self.entries:
            if e.split not in SPLITS:
                problems.append(f"{e.utterance_id}: bad split {e.split!r}")
            if not e.transcript:
                problems.append(f"{e.utterance_id}: empty transcript")
            if e.parallel_id is not None:
                ref = index.get(e.parallel_id)
                if ref is None:
                    problems.append(f"{e.utterance_id}: parallel_id {e.parallel_id} missing")
                elif ref.speech_type != SpeechType.TYPICAL.value or ref.transcript != e.transcript:
                    problems.append(f"{e.utterance_id}: parallel entry differs in type or transcript")
            if self.root is not None and not self.audio_path(e).exists():
                problems.append(f"{e.utterance_id}: missing audio {e.file_path}")
        return problems


def _as_set(v):
    if isinstance(v, (str, SpeechType)):
        return {v.value if isinstance(v, SpeechType) else v}
    return {x.value if isinstance(x, SpeechType) else x for x in v}


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for e in manifest.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    entries = [ManifestEntry(**row) for row in rows]
    return Manifest(entries, root=path.parent, path=path)


# ---------------------------------------------------------------- corpus build


@dataclass
class CorpusConfig:
    """Desk-scale corpus layout.

    Groups (utterance-id prefixes): ``main`` is the parallel target-speaker
    typical / EL set split 116/40/40; ``pool`` is multi-speaker typical speech
    where every speaker reads the same sentences (parallel across speakers);
    ``synel`` is synthetic EL with heavier corruption paired with target
    typical renderings.
    """

    seed: int = 0
    n_parallel: int = 196
    split_counts: tuple[int, int, int] = (116, 40, 40)
    n_pool_speakers: int = 10
    n_pool_sentences: int = 120
    pool_dev_fraction: float = 0.1
    n_synthetic_el: int = 240
    n_synthetic_el_speakers: int = 1
    synthetic_el_dev_fraction: float = 0.1
    lexicon_size: int = 60
    words_per_sentence: tuple[int, int] = (2, 3)
    target: SpeakerParams = field(default_factory=lambda: SpeakerParams("tgt", base_f0=125.0, formant_scale=1.0, phone_dur_s=0.07))
    el_source: SpeakerParams = field(default_factory=lambda: SpeakerParams("el", base_f0=150.0, formant_scale=0.94, phone_dur_s=0.07, tilt_hz=500.0))
    el: ElSimulationParams = field(default_factory=ElSimulationParams)
    synthetic_el_corruption: float = 0.3

    def validate(self) -> None:
        if sum(self.split_counts) != self.n_parallel:
            raise ConfigError(f"split counts {self.split_counts} do not sum to {self.n_parallel}")
        if any(c < 0 for c in self.split_counts):
            raise ConfigError("negative split count")
        if self.n_pool_speakers < 1 or self.n_parallel < 1:
            raise ConfigError("need at least one pool speaker and one parallel sentence")
        lo, hi = self.words_per_sentence
        if not 1 <= lo <= hi:
            raise ConfigError("bad words_per_sentence")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("target", "el_source"):
            if key in d and isinstance(d[key], dict):
                d[key] = SpeakerParams(**d[key])
        if "el" in d and isinstance(d["el"], dict):
            d["el"] = ElSimulationParams(**d["el"])
        for key in ("split_counts", "words_per_sentence"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def pool_speakers(self) -> list[SpeakerParams]:
        rng = np.random.default_rng(stable_seed(self.seed, "pool-speakers"))
        out = []
        for i in range(self.n_pool_speakers):
            out.append(
                SpeakerParams(
                    f"pool{i:02d}",
                    base_f0=float(rng.uniform(95, 220)),
                    formant_scale=float(rng.uniform(0.9, 1.12)),
                    phone_dur_s=float(rng.uniform(0.06, 0.08)),
                    tilt_hz=float(rng.uniform(300, 550)),
                )
            )
        return out

    def synthetic_el_speakers(self) -> list[SpeakerParams]:
        rng = np.random.default_rng(stable_seed(self.seed, "synel-speakers"))
        return [
            SpeakerParams(
                f"elsyn{i}",
                base_f0=float(rng.uniform(100, 200)),
                formant_scale=float(rng.uniform(0.92, 1.08)),
                phone_dur_s=float(rng.uniform(0.065, 0.075)),
                tilt_hz=float(rng.uniform(350, 500)),
            )
            for i in range(self.n_synthetic_el_speakers)
        ]


def make_lexicon(size: int, seed: int) -> list[tuple[str, ...]]:
    """Distinct CV-patterned words of 2 to 4 phonemes."""
    rng = np.random.default_rng(stable_seed(seed, "lexicon"))
    words: list[tuple[str, ...]] = []
    seen = set()
    while len(words) < size:
        n = int(rng.integers(2, 5))
        start_c = bool(rng.integers(2))
        w = []
        for k in range(n):
            pool = CONSONANTS if (k % 2 == 0) == start_c else VOWELS
            w.append(pool[int(rng.integers(len(pool)))])
        w = tuple(w)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_sentences(n: int, lexicon, words_per_sentence, rng: np.random.Generator, exclude=()) -> list[tuple[str, ...]]:
    seen = set(exclude)
    out = []
    lo, hi = words_per_sentence
    while len(out) < n:
        k = int(rng.integers(lo, hi + 1))
        s = tuple(sym for i in rng.integers(0, len(lexicon), size=k) for sym in lexicon[int(i)])
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _split_of(i: int, counts) -> str:
    a, b, _ = counts
    return "train" if i < a else ("dev" if i < a + b else "test")


def build_corpus(config: CorpusConfig, out_dir) -> Manifest:
    """Render every utterance to ``out_dir/wav`` and write ``out_dir/manifest.jsonl``."""
    config.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {out_dir}: {exc}") from exc

    seed = config.seed
    lexicon = make_lexicon(config.lexicon_size, seed)
    rng = np.random.default_rng(stable_seed(seed, "sentences"))
    main_sents = make_sentences(config.n_parallel, lexicon, config.words_per_sentence, rng)
    pool_sents = make_sentences(config.n_pool_sentences, lexicon, config.words_per_sentence, rng, exclude=main_sents)
    synel_sents = make_sentences(
        config.n_synthetic_el, lexicon, config.words_per_sentence, rng, exclude=main_sents + pool_sents
    )

    entries: list[ManifestEntry] = []

    def emit(utt: Utterance, split: str, parallel_id=None):
        rel = f"wav/{utt.id}.wav"
        write_wav(out_dir / rel, utt.waveform)
        entries.append(
            ManifestEntry(
                utterance_id=utt.id,
                file_path=rel,
                transcript=list(utt.transcript),
                speech_type=utt.speech_type.value,
                speaker_id=utt.speaker_id,
                split=split,
                parallel_id=parallel_id,
            )
        )

    el_params = replace(config.el, seed=stable_seed(seed, "el"))
    for i, text in enumerate(main_sents):
        split = _split_of(i, config.split_counts)
        tgt = generate_typical(text, config.target, stable_seed(seed, "main", i), utt_id=f"main-tgt-{i:04d}")
        emit(tgt, split)
        src = generate_typical(text, config.el_source, stable_seed(seed, "main-src", i), utt_id=f"main-elsrc-{i:04d}")
        emit(simulate_el(src, el_params, utt_id=f"main-el-{i:04d}"), split, parallel_id=tgt.id)

    n_pool_dev = int(round(config.n_pool_sentences * config.pool_dev_fraction))
    for spk in config.pool_speakers():
        for i, text in enumerate(pool_sents):
            split = "dev" if i >= config.n_pool_sentences - n_pool_dev else "train"
            emit(
                generate_typical(text, spk, stable_seed(seed, "pool", spk.speaker_id, i), utt_id=f"pool-{spk.speaker_id}-{i:04d}"),
                split,
            )

    syn_params = replace(config.el, corruption_prob=config.synthetic_el_corruption, seed=stable_seed(seed, "synel"))
    n_syn_dev = int(round(config.n_synthetic_el * config.synthetic_el_dev_fraction))
    syn_speakers = config.synthetic_el_speakers()
    for i, text in enumerate(synel_sents):
        split = "dev" if i >= config.n_synthetic_el - n_syn_dev else "train"
        tgt = generate_typical(text, config.target, stable_seed(seed, "synel-tgt", i), utt_id=f"synel-tgt-{i:04d}")
        emit(tgt, split)
        spk = syn_speakers[i % len(syn_speakers)]
        src = generate_typical(text, spk, stable_seed(seed, "synel-src", i), utt_id=f"synel-src-{i:04d}")
        emit(simulate_el(src, syn_params, utt_id=f"synel-{spk.speaker_id}-{i:04d}"), split, parallel_id=tgt.id)

    manifest = Manifest(entries, root=out_dir, path=out_dir / "manifest.jsonl")
    write_manifest(manifest, manifest.path)
    with open(out_dir / "corpus_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    logger.info("wrote %d utterances to %s", len(entries), out_dir)
    return manifest


def corpus_roles(config: CorpusConfig) -> dict:
    """Speaker ids playing each role in the experiment recipes."""
    pool = [s.speaker_id for s in config.pool_speakers()]
    return {
        "target": config.target.speaker_id,
        "el": config.el_source.speaker_id,
        "pool": pool,
        "vc_source": pool[0],
        "vc_target": pool[1] if len(pool) > 1 else pool[0],
        "synthetic_el": [s.speaker_id for s in config.synthetic_el_speakers()],
    }


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


__all__ = [
    "INVENTORY",
    "PHONEMES",
    "SpeechType",
    "SpeakerParams",
    "ElSimulationParams",
    "Utterance",
    "generate_typical",
    "simulate_el",
    "Manifest",
    "ManifestEntry",
    "CorpusConfig",
    "build_corpus",
    "load_manifest",
    "write_manifest",
    "read_wav",
    "write_wav",
]
