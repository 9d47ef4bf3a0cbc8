"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Criteria 6-10 need the full default experiment. It is built (or reused from
the checkpoint cache) under $ELENHANCE_CKPT_ROOT, defaulting to
``<repo>/checkpoints``. A cold run takes a little over an hour on one CPU core.
"""
import itertools
import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from test_eval import all_paths, lev
from test_recognition import TINY, bce, brute_ctc, per_utterance_sid, random_batch, relative_grad_error, small_model

from elenhance.corpus import SpeechType, corpus_roles, load_manifest
from elenhance.dsp import F0Track
from elenhance.evaluation.metrics import cer, dtw_align, f0_metrics, mcd
from elenhance.features import FeatureStore
from elenhance.pipeline import ROOT_ENV, load_config, run_experiment
from elenhance.pipeline.convert import convert_file
from elenhance.pipeline.evaluate import el_test_entries, evaluate_experiment
from elenhance.pipeline.run import corpus_config, recognition_recipes
from elenhance.recognition.loss import compute_loss, ctc_losses
from elenhance.recognition.model import RecognitionBatch, Recognizer, RecognizerConfig, RecognizerOutput
from elenhance.recognition.train import evaluate_cer, train_stage
from elenhance.synthesis import DiffusionConfig, DiffusionDecoder, guided_noise
from elenhance.pipeline.config import DEFAULTS

BUDGET_S = 2 * 3600
ROOT = Path(os.environ.get(ROOT_ENV) or Path(__file__).resolve().parents[1] / "checkpoints")


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- property criteria


def test_criterion_01_masking_suite():
    t0 = time.perf_counter()
    model = small_model()
    rng = np.random.default_rng(100)
    worst_sid, exact = 0.0, True
    for _ in range(100):
        n_el = int(rng.integers(1, 4))
        n_typ = int(rng.integers(1, 4))
        el = random_batch(rng, n_el, [SpeechType.EL] * n_el)
        typ = random_batch(rng, n_typ, [SpeechType.TYPICAL] * n_typ)
        mixed = RecognitionBatch(el.features + typ.features, el.transcripts + typ.transcripts, el.speech_types + typ.speech_types)
        with torch.no_grad():
            a = compute_loss(model, el, "intermediate")
            b = compute_loss(model, mixed, "intermediate")
        exact &= a.ctc.item() == b.ctc.item() and a.attn.item() == b.attn.item()
        y = [1.0] * n_el + [0.0] * n_typ
        worst_sid = max(worst_sid, abs(b.sid.item() - bce(per_utterance_sid(model, mixed), y)))
    secs = time.perf_counter() - t0
    ok = exact and worst_sid <= 1e-9 and secs < 60
    record(1, ok, f"ctc/attn bit-identical={exact}, max |L_SID - BCE oracle|={worst_sid:.2e}, {secs:.1f}s for 100 batches")


def test_criterion_02_ctc_brute_force():
    rng = np.random.default_rng(2)
    worst, cases = 0.0, 0
    for T in range(1, 5):
        for L in range(1, 4):
            for label in itertools.product((1, 2, 3), repeat=L):
                logits = torch.tensor(rng.standard_normal((1, T, 4)))
                out = RecognizerOutput(logits, torch.tensor([T]), torch.zeros(1), [], targets=[list(label)])
                got = float(ctc_losses(out)[0])
                worst = max(worst, abs(got - brute_ctc(logits[0].log_softmax(-1).numpy(), label)))
                cases += 1
    record(2, worst <= 1e-6, f"{cases} cases, max abs error {worst:.2e}")


def test_criterion_03_gradient_checks():
    torch.manual_seed(0)
    rec = Recognizer(RecognizerConfig(**TINY)).double()
    batch = random_batch(np.random.default_rng(4), 3, ["EL", "TYPICAL", "EL"], n_mels=4, vocab=3)
    rec.set_normalizer(batch.features)
    e_rec = relative_grad_error(rec, lambda: compute_loss(rec, batch, "intermediate").total, n_checks=100)

    from elenhance.synthesis.diffusion import diffusion_loss

    torch.manual_seed(0)
    dec = DiffusionDecoder(
        DiffusionConfig(n_mels=3, unit_dim=3, spk_dim=2, channels=4, layers=1, steps=20, x0_weight_cap=5.0, p_uncond=0.5)
    ).double()
    # the output layer starts at zero, which would zero every upstream gradient
    torch.nn.init.normal_(dec.output.weight, std=0.5)
    rng = np.random.default_rng(0)
    mels = [rng.standard_normal((7, 3)), rng.standard_normal((5, 3))]
    units = [rng.dirichlet(np.ones(3), 7), rng.dirichlet(np.ones(3), 5)]
    spk = np.eye(2)
    e_dec = relative_grad_error(dec, lambda: diffusion_loss(dec, mels, units, spk, torch.Generator().manual_seed(3)), n_checks=100)
    n_rec = sum(p.numel() for p in rec.parameters())
    n_dec = sum(p.numel() for p in dec.parameters())
    ok = max(e_rec, e_dec) <= 1e-3 and max(n_rec, n_dec) <= 1000
    record(3, ok, f"recognition rel err {e_rec:.1e} ({n_rec} params), diffusion rel err {e_dec:.1e} ({n_dec} params)")


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(4)
    cer_ok = True
    for _ in range(1000):
        a = tuple(rng.choice(list("abcde"), size=int(rng.integers(1, 10))))
        b = tuple(rng.choice(list("abcde"), size=int(rng.integers(0, 10))))
        cer_ok &= cer(a, b) == lev(a, b) / len(a)
    dtw_err = 0.0
    for n, m in itertools.product(range(1, 7), repeat=2):
        x, y = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
        best = min(sum(np.linalg.norm(x[i, 1:] - y[j, 1:]) for i, j in p) for p in all_paths(n, m))
        dtw_err = max(dtw_err, abs(dtw_align(x, y)[1] - best))
    a = rng.standard_normal((10, 25))
    b = a.copy()
    b[:, 5] += 1.0
    mcd_err = abs(mcd(a, b) - 10 / math.log(10) * math.sqrt(2))
    f = 100 + 80 * rng.random((2, 50))
    v = np.ones(50, bool)
    path = np.stack([np.arange(50)] * 2, 1)
    x, y = np.log2(f[0]), np.log2(f[1])
    direct = ((x - x.mean()) * (y - y.mean())).sum() / math.sqrt(((x - x.mean()) ** 2).sum() * ((y - y.mean()) ** 2).sum())
    corr_err = abs(f0_metrics(F0Track(f[0], v), F0Track(f[1], v), path)["corr"] - direct)
    ok = cer_ok and dtw_err <= 1e-9 and mcd_err <= 1e-6 and corr_err <= 1e-9
    record(4, ok, f"cer exact on 1k pairs={cer_ok}, dtw err {dtw_err:.1e}, mcd err {mcd_err:.1e}, corr err {corr_err:.1e}")


def test_criterion_05_diffusion_correctness():
    dec = DiffusionDecoder(DiffusionConfig())
    gen = torch.Generator().manual_seed(5)
    x0 = torch.zeros(200_000)
    var_err = 0.0
    for n in (1, 25, 50, 75, 100):
        target = 1.0 - float(dec.alphas_bar[n - 1])
        got = float(dec.q_sample(x0, n, torch.randn(x0.shape, generator=gen)).var())
        var_err = max(var_err, abs(got - target) / target)

    from test_synthesis import test_toy_mixture_recovery

    try:
        test_toy_mixture_recovery()
        mixture_ok = True
    except AssertionError:
        mixture_ok = False
    a, b = np.random.default_rng(5).standard_normal((2, 8, 3))
    guided_ok = np.array_equal(guided_noise(a, b, 0.0), a) and np.allclose(guided_noise(a, a, 2.5), a, rtol=0, atol=1e-12)
    steps_ok = DEFAULTS["synthesis"]["model"]["steps"] == 100 == DiffusionConfig().steps
    ok = var_err <= 0.05 and mixture_ok and guided_ok and steps_ok
    record(5, ok, f"max rel variance err {var_err:.3f}, mixture means within 0.1={mixture_ok}, guidance identities={guided_ok}, N=100 default={steps_ok}")


# ---------------------------------------------------------------- experiment criteria


@pytest.fixture(scope="session")
def full_run():
    t0 = time.perf_counter()
    result = run_experiment(None, ROOT)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def full_report(full_run):
    return evaluate_experiment(full_run[0])


def test_criterion_06_recognition_ordering(full_run):
    result = full_run[0]
    t0 = time.perf_counter()
    cfg = result.config
    manifest = load_manifest(result.path("corpus") / "manifest.jsonl")
    store = FeatureStore(manifest)
    roles = corpus_roles(corpus_config(cfg))
    _, r2, r3 = recognition_recipes(cfg, roles)
    typ_test = manifest.select(group="main", speech_type="TYPICAL", split="test")
    el_test = manifest.select(group="main", speakers=[roles["el"]], split="test")

    def cers(model):
        return 100 * evaluate_cer(model, store, typ_test), 100 * evaluate_cer(model, store, el_test)

    s1 = Recognizer.load(result.path("recognition") / "stage1.ckpt")
    rows = {"stage1": cers(s1), "el_only": cers(train_stage(s1, r3, store).model)}
    for name, mode in (("joint", "standard"), ("sid_only", "intermediate_no_mask"), ("sid_mask", "intermediate")):
        m2 = train_stage(s1, replace(r2, loss_mode=mode), store).model
        rows[name] = cers(train_stage(m2, r3, store).model)
    secs = time.perf_counter() - t0
    el = {k: v[1] for k, v in rows.items()}
    order_ok = el["sid_mask"] <= el["sid_only"] <= el["joint"]
    keep_ok = rows["sid_mask"][0] - rows["stage1"][0] <= 5.0
    forget_ok = rows["el_only"][0] - rows["stage1"][0] > 15.0
    table = ", ".join(f"{k} typ/EL {v[0]:.1f}/{v[1]:.1f}" for k, v in rows.items())
    ok = order_ok and keep_ok and forget_ok and secs <= 1800
    record(6, ok, f"EL order={order_ok}, typical kept within 5={keep_ok}, EL-only forgets >15={forget_ok}, {secs:.0f}s; {table}")


def test_criterion_07_system4_beats_system1(full_run, full_report):
    base = full_run[0].config
    outcomes = []
    for seed in (0, 1, 2):
        if seed == base["seed"] and base["alignment"]["seed"] is None:
            rows = {r.system_id: r for r in full_report.rows}
        else:
            cfg = load_config({"alignment": {"seed": seed}, "systems": ["1", "4"]})
            res = run_experiment(cfg, ROOT)
            rows = {r.system_id: r for r in evaluate_experiment(res, ["1", "4"]).rows}
        s1, s4 = rows["1"], rows["4"]
        outcomes.append((seed, s4.cer_pct < s1.cer_pct and s4.mcd_db < s1.mcd_db, s1, s4))
    wins = sum(o[1] for o in outcomes)
    detail = "; ".join(f"seed {s}: sys4 CER {b.cer_pct:.1f} MCD {b.mcd_db:.2f} vs sys1 CER {a.cer_pct:.1f} MCD {a.mcd_db:.2f}" for s, _, a, b in outcomes)
    record(7, wins >= 2, f"{wins}/3 seeds won; {detail}")


def test_criterion_08_rate_correction(full_report):
    ratios = {r.system_id: r.extra["duration_ratio_mean"] for r in full_report.rows}
    ok = all(0.65 <= v <= 0.90 for v in ratios.values())
    record(8, ok, "mean converted/EL duration ratio " + ", ".join(f"sys{k} {v:.3f}" for k, v in sorted(ratios.items())))


def test_criterion_09_convert_determinism(full_run, tmp_path):
    result = full_run[0]
    manifest = load_manifest(result.path("corpus") / "manifest.jsonl")
    entry = el_test_entries(manifest, corpus_roles(corpus_config(result.config))["el"])[0]
    same = {}
    for sid in sorted(result.lineages):
        lin = result.path(f"alignment-{sid}") / "lineage.json"
        outs = [tmp_path / f"{sid}-{i}.wav" for i in range(2)]
        for o in outs:
            convert_file(lin, manifest.audio_path(entry), o, seed=7)
        same[sid] = outs[0].read_bytes() == outs[1].read_bytes()
    record(9, all(same.values()), "bit-identical per system: " + ", ".join(f"sys{k}={v}" for k, v in same.items()))


def test_criterion_10_budget(full_run, full_report):
    result = full_run[0]
    train_s = sum(float(json.loads((s.path / "stage.json").read_text())["seconds"]) for s in result.stages.values())
    eval_s = sum(r.extra.get("eval_seconds", float("nan")) for r in full_report.rows)
    total = train_s + eval_s
    ok = len(full_report.rows) == 5 and total < BUDGET_S
    record(10, ok, f"train {train_s / 60:.1f} min + evaluate {eval_s / 60:.1f} min = {total / 60:.1f} min for {len(full_report.rows)} systems (budget 120 min)")
