import itertools
import math

import numpy as np
import pytest

from elenhance.dsp import F0Track
from elenhance.errors import EmptyInput, EmptyReference, InsufficientVoicing, ShapeError
from elenhance.evaluation.metrics import cer, corpus_cer, dtw_align, edit_distance, f0_metrics, mcd
from elenhance.evaluation.system import EvalReport, EvalRow, utterance_metrics


def lev(a, b):
    # memoised recursion, structurally unlike the library's rolling-row DP
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_cer_matches_recursive_edit_distance():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = tuple(rng.choice(list("abcd"), size=int(rng.integers(1, 9))))
        b = tuple(rng.choice(list("abcd"), size=int(rng.integers(0, 9))))
        assert edit_distance(a, b) == lev(a, b)
        assert cer(a, b) == lev(a, b) / len(a)


def test_cer_edge_cases():
    assert cer("abc", "abc") == 0.0
    assert cer("ab", "xyzw") == 2.0
    with pytest.raises(EmptyReference):
        cer("", "a")
    assert corpus_cer([("ab", "a"), ("cdef", "cdef")]) == 1 / 6


def all_paths(n, m):
    # every monotonic path from (0, 0) to (n-1, m-1)
    if n == 1 and m == 1:
        yield [(0, 0)]
        return
    for di, dj in ((1, 1), (1, 0), (0, 1)):
        if n - di >= 1 and m - dj >= 1:
            for p in all_paths(n - di, m - dj):
                yield p + [(n - 1, m - 1)]


def test_dtw_matches_exhaustive_search():
    rng = np.random.default_rng(1)
    for n, m in itertools.product(range(1, 6), repeat=2):
        a, b = rng.standard_normal((n, 4)), rng.standard_normal((m, 4))
        path, cost = dtw_align(a, b)
        best = min(sum(np.linalg.norm(a[i, 1:] - b[j, 1:]) for i, j in p) for p in all_paths(n, m))
        assert abs(cost - best) <= 1e-9
        got = sum(np.linalg.norm(a[i, 1:] - b[j, 1:]) for i, j in path)
        assert abs(got - cost) <= 1e-9
        assert tuple(path[0]) == (0, 0) and tuple(path[-1]) == (n - 1, m - 1)


def test_dtw_errors():
    with pytest.raises(EmptyInput):
        dtw_align(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        dtw_align(np.zeros((2, 3)), np.zeros((2, 4)))


def test_mcd_unit_offset():
    a = np.random.default_rng(2).standard_normal((12, 25))
    b = a.copy()
    b[:, 3] += 1.0
    b[:, 0] += 5.0  # c0 must not count
    assert abs(mcd(a, b) - 10 / math.log(10) * math.sqrt(2)) <= 1e-6
    assert mcd(a, a) == 0.0


def test_f0_corr_matches_direct_formula():
    rng = np.random.default_rng(3)
    fa = 100 + 50 * rng.random(40)
    fb = 120 + 30 * rng.random(40)
    va, vb = rng.random(40) > 0.2, rng.random(40) > 0.2
    a = F0Track(np.where(va, fa, 0.0), va)
    b = F0Track(np.where(vb, fb, 0.0), vb)
    path = np.stack([np.arange(40), np.arange(40)], 1)
    res = f0_metrics(a, b, path)
    both = va & vb
    x, y = np.log2(fa[both]), np.log2(fb[both])
    n = len(x)
    r = (n * (x * y).sum() - x.sum() * y.sum()) / math.sqrt((n * (x * x).sum() - x.sum() ** 2) * (n * (y * y).sum() - y.sum() ** 2))
    assert abs(res["corr"] - r) <= 1e-9
    assert abs(res["rmse"] - math.sqrt(np.mean((1200 * (x - y)) ** 2))) <= 1e-9
    assert res["n_pairs"] == n


def test_f0_needs_voicing():
    t = F0Track(np.zeros(5), np.zeros(5, bool))
    with pytest.raises(InsufficientVoicing):
        f0_metrics(t, t, np.stack([np.arange(5)] * 2, 1))


def test_utterance_metrics_identity():
    t = np.arange(16000) / 16000
    x = 0.3 * np.sin(2 * np.pi * 150 * t) + 0.1 * np.sin(2 * np.pi * 450 * t)
    m = utterance_metrics(x, x)
    assert m["mcd"] == 0.0 and m["f0_rmse"] == 0.0


def test_report_round_trip(tmp_path):
    rep = EvalReport()
    rep.add(EvalRow("4", "bnf", "units", "parallel_vc", 7.1, 12.0, 80.0, 0.5, 10))
    rep.add(EvalRow("1", "mel", "mel", "tts_ae", 9.0, 40.0, 90.0, 0.2, 10))
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back == rep
    assert "MCD [dB]" in back.table().splitlines()[0]
    with pytest.raises(ValueError):
        rep.add(EvalRow("2", "mel", "mel", "x", float("nan"), 1.0, 1.0, 0.0))
