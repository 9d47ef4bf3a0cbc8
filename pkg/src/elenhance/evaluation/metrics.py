"""Objective metrics: CER, DTW alignment, MCD and log-F0 statistics."""
from __future__ import annotations

import math

import numpy as np

from ..dsp import F0Track, McepSequence
from ..errors import EmptyInput, EmptyReference, InsufficientVoicing, ShapeError

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref, hyp) -> float:
    """Edit distance normalised by reference length (may exceed 1)."""
    ref = list(ref)
    if not ref:
        raise EmptyReference("reference transcript is empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(pairs) -> float:
    """Total edits over total reference symbols for (ref, hyp) pairs."""
    edits = total = 0
    for ref, hyp in pairs:
        ref = list(ref)
        if not ref:
            raise EmptyReference("reference transcript is empty")
        edits += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise EmptyReference("no references")
    return edits / total


def _frames(seq) -> np.ndarray:
    return np.asarray(seq.frames if isinstance(seq, McepSequence) else seq, dtype=np.float64)


def dtw_align(a, b, exclude_c0: bool = True):
    """Minimum-cost monotonic alignment with steps (1,0), (0,1), (1,1).

    Frame cost is the Euclidean distance over c1..cD (c0 dropped when
    ``exclude_c0``). Returns (path as an (L, 2) int array, total cost).
    """
    fa, fb = _frames(a), _frames(b)
    if fa.ndim != 2 or fb.ndim != 2 or len(fa) == 0 or len(fb) == 0:
        raise EmptyInput("dtw needs two non-empty (T, D) sequences")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if exclude_c0:
        fa, fb = fa[:, 1:], fb[:, 1:]
    n, m = len(fa), len(fb)
    dist = np.sqrt(np.maximum(((fa[:, None, :] - fb[None, :, :]) ** 2).sum(-1), 0.0))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = dist[i - 1]
        diag = acc[i - 1, :-1]
        up = acc[i - 1, 1:]
        best = np.minimum(diag, up) + row
        # left moves are sequential within the row
        cur = acc[i]
        for j in range(1, m + 1):
            v = best[j - 1]
            left = cur[j - 1] + row[j - 1]
            cur[j] = v if v <= left else left
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        # ties: diagonal first, then the move toward the grid diagonal, which
        # keeps the path mirror-symmetric under swapping a and b
        toward_up = i * m > j * n
        moves = [
            (acc[i - 1, j - 1], 0, i - 1, j - 1),
            (acc[i - 1, j], 1 if toward_up else 2, i - 1, j),
            (acc[i, j - 1], 2 if toward_up else 1, i, j - 1),
        ]
        _, _, i, j = min(moves, key=lambda z: (z[0], z[1]))
        path.append((i - 1, j - 1))
    return np.array(path[::-1], dtype=int), float(acc[n, m])


def mcd(a, b, path=None) -> float:
    """Mean mel-cepstral distortion (dB) over DTW-aligned frame pairs, c0 excluded."""
    fa, fb = _frames(a), _frames(b)
    if path is None:
        path, _ = dtw_align(fa, fb)
    diff = fa[path[:, 0], 1:] - fb[path[:, 1], 1:]
    return float(np.mean(MCD_CONST * np.sqrt((diff**2).sum(-1))))


def f0_metrics(a: F0Track, b: F0Track, path) -> dict:
    """Log-F0 RMSE (cents) and Pearson correlation over co-voiced aligned pairs."""
    path = np.asarray(path, dtype=int)
    ia, ib = path[:, 0], path[:, 1]
    both = a.voiced[ia] & b.voiced[ib]
    if both.sum() < 2:
        raise InsufficientVoicing(f"only {int(both.sum())} co-voiced aligned frames")
    la = np.log2(a.f0_hz[ia][both])
    lb = np.log2(b.f0_hz[ib][both])
    rmse = float(np.sqrt(np.mean((1200.0 * (la - lb)) ** 2)))
    da, db = la - la.mean(), lb - lb.mean()
    denom = math.sqrt(float((da * da).sum() * (db * db).sum()))
    corr = float((da * db).sum() / denom) if denom > 0 else (1.0 if np.allclose(la, lb) else 0.0)
    return {"rmse": rmse, "corr": float(np.clip(corr, -1.0, 1.0)), "n_pairs": int(both.sum())}
