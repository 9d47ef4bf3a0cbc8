import numpy as np
import pytest

from elenhance import dsp
from elenhance.corpus import (
    INVENTORY,
    SAMPLE_RATE,
    CorpusConfig,
    ElSimulationParams,
    SpeakerParams,
    SpeechType,
    build_corpus,
    corrupt_symbols,
    f0_contour,
    generate_typical,
    load_manifest,
    read_wav,
    simulate_el,
    write_manifest,
    write_wav,
)
from elenhance.errors import ConfigError, EmptyInput, InvalidSpeechType, InvalidSymbol, IoError

SPK = SpeakerParams("s1", base_f0=130.0)
TEXT = ("k", "a", "t", "o", "m", "i")


def test_generate_typical_deterministic():
    a = generate_typical(TEXT, SPK, seed=7)
    b = generate_typical(TEXT, SPK, seed=7)
    assert np.array_equal(a.waveform, b.waveform)
    assert a.transcript == TEXT
    c = generate_typical(TEXT, SPK, seed=8)
    assert not np.array_equal(a.waveform, c.waveform)


def test_generate_typical_duration():
    u = generate_typical(TEXT, SPK, seed=1)
    assert abs(u.duration_s - len(TEXT) * SPK.phone_dur_s) <= 0.010
    assert u.duration_s == len(u.waveform) / SAMPLE_RATE


def test_generate_typical_errors():
    with pytest.raises(InvalidSymbol):
        generate_typical(("a", "Q"), SPK, 0)
    with pytest.raises(EmptyInput):
        generate_typical((), SPK, 0)


def test_typical_f0_follows_contour():
    # voiced-only text so every frame carries the contour
    text = tuple("amanoiruemo")
    u = generate_typical(text, SPK, seed=3)
    track = dsp.extract_f0(u.waveform)
    contour = f0_contour(len(u.waveform), SPK, 3)
    hop = int(SAMPLE_RATE * dsp.DEFAULT_PARAMS.frame_shift_ms / 1000)
    win = int(SAMPLE_RATE * dsp.DEFAULT_PARAMS.frame_length_ms / 1000)
    centres = np.arange(len(track.f0_hz)) * hop + win // 2
    ref = contour[np.clip(centres, 0, len(contour) - 1)]
    v = track.voiced
    assert v.mean() >= 0.9
    assert np.max(np.abs(track.f0_hz[v] - ref[v])) <= 5.0


def test_simulate_el_properties():
    src = generate_typical(TEXT, SPK, seed=2)
    el = simulate_el(src, ElSimulationParams(corruption_prob=0.0, seed=1))
    assert el.speech_type == SpeechType.EL
    assert el.transcript == src.transcript
    assert tuple(el.metadata["rendered"]) == src.transcript
    assert el.metadata["source_id"] == src.id
    assert abs(el.duration_s / src.duration_s - 1.32) < 0.02
    track = dsp.extract_f0(el.waveform)
    assert track.voiced.sum() > 10
    assert np.std(track.f0_hz[track.voiced]) < 1.0


def test_simulate_el_rejects_el_input():
    el = simulate_el(generate_typical(TEXT, SPK, 0))
    with pytest.raises(InvalidSpeechType):
        simulate_el(el)


def test_corruption_rate_matches_probability():
    rng = np.random.default_rng(0)
    text = tuple(INVENTORY) * 200
    out = corrupt_symbols(text, 0.3, rng)
    rate = np.mean([a != b for a, b in zip(text, out)])
    # binomial std for n=4000 is about 0.007
    assert abs(rate - 0.3) < 0.03
    assert corrupt_symbols(text, 0.0, rng) == text


def test_el_params_validation():
    with pytest.raises(ConfigError):
        ElSimulationParams(corruption_prob=1.0)
    with pytest.raises(ConfigError):
        ElSimulationParams(tempo_factor=0.9)


def test_default_split_counts():
    cfg = CorpusConfig()
    assert cfg.split_counts == (116, 40, 40)
    cfg.validate()
    with pytest.raises(ConfigError):
        CorpusConfig(split_counts=(100, 40, 40)).validate()


def test_tiny_corpus_invariants(tiny_corpus):
    m = tiny_corpus
    assert m.validate() == []
    main = m.select(group="main", speech_type="TYPICAL")
    assert [len(main.select(split=s)) for s in ("train", "dev", "test")] == [6, 3, 3]
    index = m.by_id()
    for e in m.select(group="main", speech_type="EL", split="test"):
        ref = index[e.parallel_id]
        assert ref.split == "test" and ref.speech_type == "TYPICAL"
        assert ref.transcript == e.transcript


def test_el_duration_ratio(tiny_corpus):
    m = tiny_corpus
    pairs = [(e, r) for e, r in m.parallel_pairs() if e.group == "main"]
    el = sum(len(m.load_audio(e)) for e, _ in pairs)
    typ = sum(len(m.load_audio(r)) for _, r in pairs)
    # same speaker timing for source and target in the main set
    assert abs(el / typ - 1.32) / 1.32 < 0.02


def test_manifest_round_trip(tiny_corpus, tmp_path):
    root = tiny_corpus.root
    path = write_manifest(tiny_corpus, tmp_path / "m.jsonl")
    again = load_manifest(path)
    assert again == tiny_corpus
    # saving a copy elsewhere must not re-anchor the original's audio paths
    assert tiny_corpus.root == root


def test_build_is_deterministic(tmp_path):
    cfg = CorpusConfig(n_parallel=3, split_counts=(1, 1, 1), n_pool_speakers=1, n_pool_sentences=2, n_synthetic_el=2)
    a = build_corpus(cfg, tmp_path / "a")
    b = build_corpus(cfg, tmp_path / "b")
    assert a == b
    for e in a:
        assert np.array_equal(a.load_audio(e), b.load_audio(b.by_id()[e.utterance_id]))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        build_corpus(CorpusConfig(n_parallel=3, split_counts=(1, 1, 1)), blocker / "sub")


def test_wav_round_trip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, 1600))
    write_wav(tmp_path / "x.wav", x)
    y, sr = read_wav(tmp_path / "x.wav")
    assert sr == SAMPLE_RATE
    assert np.max(np.abs(x - y)) < 1.0 / 32767 + 1e-9
