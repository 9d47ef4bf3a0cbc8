import numpy as np
import pytest

from elenhance.corpus import SpeakerParams, generate_typical
from elenhance.errors import ConfigError, EmptyInput, IoError, ShapeError
from elenhance.units import (
    UnitCodebook,
    dump_units,
    external_unit_adapter,
    extract_units,
    fit_unit_extractor,
    resample_units,
)


def toy_codebook(rng, k=5, d=24, tau=1.0):
    return UnitCodebook(rng.standard_normal((k, d)), np.zeros(d), np.ones(d), tau)


def test_soft_assign_rows_are_distributions(rng):
    cb = toy_codebook(rng)
    p = cb.soft_assign(rng.standard_normal((30, 24)))
    assert p.shape == (30, 5)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(1), 1.0, atol=1e-12)


def test_soft_assign_formula(rng):
    cb = toy_codebook(rng, tau=0.7)
    x = rng.standard_normal((4, 24))
    for row, p in zip(x, cb.soft_assign(x)):
        d = np.array([np.linalg.norm(row - c) for c in cb.centroids])
        w = np.exp(-d / 0.7)
        assert np.allclose(p, w / w.sum(), atol=1e-12)


def test_nearest_centroid_dominates_at_low_tau(rng):
    cb = toy_codebook(rng, tau=1e-3)
    p = cb.soft_assign(cb.centroids + 1e-3)
    assert np.array_equal(p.argmax(1), np.arange(5))
    assert p.max(1).min() > 0.99


def test_codebook_validation(rng):
    with pytest.raises(ConfigError):
        UnitCodebook(np.full((2, 3), np.nan), np.zeros(3), np.ones(3))
    with pytest.raises(ConfigError):
        UnitCodebook(np.zeros((2, 3)), np.zeros(3), np.ones(3), tau=0.0)
    with pytest.raises(ShapeError):
        toy_codebook(rng).soft_assign(np.zeros((3, 7)))


def test_resample_units(rng):
    u = rng.dirichlet(np.ones(4), size=10)
    out = resample_units(u, 25)
    assert out.shape == (25, 4)
    assert np.allclose(out.sum(1), 1.0)
    assert np.allclose(out[0], u[0]) and np.allclose(out[-1], u[-1])
    assert np.allclose(resample_units(u, 10), u)
    with pytest.raises(EmptyInput):
        resample_units(np.zeros((0, 4)), 3)


def test_fit_and_extract(tiny_corpus, tmp_path):
    main = tiny_corpus.select(group="main", split="train")
    cb = fit_unit_extractor(main, k=8, seed=0)
    assert cb.size == 8 and cb.dim == 24
    again = fit_unit_extractor(main, k=8, seed=0)
    assert np.array_equal(cb.centroids, again.centroids)
    cb.save(tmp_path / "cb.npz")
    back = UnitCodebook.load(tmp_path / "cb.npz")
    wave = generate_typical(tuple("sakanaomiru"), SpeakerParams("x"), 0).waveform
    a, b = extract_units(cb, wave), extract_units(back, wave)
    assert np.array_equal(a.frames, b.frames)
    # 20 ms hop: about 50 frames per second
    assert abs(len(a) - len(wave) / 16000 * 50) <= 2
    with pytest.raises(ConfigError):
        fit_unit_extractor(main, k=10**7)


def test_unit_dump_adapter(tiny_corpus, tmp_path):
    subset = tiny_corpus.select(group="main", split="test")
    cb = fit_unit_extractor(tiny_corpus.select(group="main", split="train"), k=4)
    dump_units(cb, subset, tmp_path / "u")
    store = external_unit_adapter(tmp_path / "u", dim=4)
    store.check_complete(subset)
    e = subset.entries[0]
    assert np.allclose(store[e.utterance_id].frames, extract_units(cb, subset.load_audio(e)).frames, atol=1e-6)
    with pytest.raises(ConfigError):
        external_unit_adapter(tmp_path / "u", dim=5)[e.utterance_id]
    (tmp_path / "u" / f"{e.utterance_id}.mat").unlink()
    with pytest.raises(IoError):
        store.check_complete(subset)
    with pytest.raises(IoError):
        external_unit_adapter(tmp_path / "nowhere")
