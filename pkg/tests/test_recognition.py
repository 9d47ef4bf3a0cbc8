import itertools
import math

import numpy as np
import pytest
import torch

from elenhance.corpus import INVENTORY, SpeechType
from elenhance.errors import ConfigError, EmptyBatch, ShapeError
from elenhance.recognition.decode import attention_greedy, collapse_ctc, joint_beam_search
from elenhance.recognition.loss import compute_loss, ctc_losses, sid_loss
from elenhance.recognition.model import (
    RecognitionBatch,
    Recognizer,
    RecognizerConfig,
    RecognizerOutput,
    extract_bnf,
    subsampled_length,
)

TINY = dict(n_mels=4, d_model=4, heads=1, ff=4, kernel_size=3, bnf_dim=4, vocab=3, enc_layers=1, dec_layers=1, subsampling=1, dropout=0.0)


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(n_mels=6, d_model=16, heads=2, ff=32, kernel_size=3, bnf_dim=8, enc_layers=1, dec_layers=1, dropout=0.0)
    cfg.update(kw)
    m = Recognizer(RecognizerConfig(**cfg)).double()
    m.eval()
    return m


def random_batch(rng, n, types, n_mels=6, vocab=None):
    syms = INVENTORY if vocab is None else INVENTORY[:vocab]
    feats, texts = [], []
    for _ in range(n):
        feats.append(rng.standard_normal((int(rng.integers(12, 30)), n_mels)))
        texts.append(tuple(rng.choice(syms, size=int(rng.integers(1, 4)))))
    return RecognitionBatch(feats, texts, list(types))


def brute_ctc(logp, label):
    """-log of the summed probability of every frame path collapsing to ``label``."""
    T, C = logp.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse_ctc(list(path)) == list(label):
            total += math.exp(sum(logp[t, c] for t, c in enumerate(path)))
    return -math.log(total) if total > 0 else 0.0


def test_ctc_matches_brute_force():
    rng = np.random.default_rng(0)
    for T in range(1, 5):
        for L in range(1, 4):
            for label in itertools.product((1, 2, 3), repeat=L):
                logits = torch.tensor(rng.standard_normal((1, T, 4)))
                out = RecognizerOutput(logits, torch.tensor([T]), torch.zeros(1), [], targets=[list(label)])
                got = float(ctc_losses(out)[0])
                want = brute_ctc(logits[0].log_softmax(-1).numpy(), label)
                assert abs(got - want) <= 1e-6, (T, label)


def test_collapse_ctc():
    assert collapse_ctc([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]
    assert collapse_ctc([0, 0]) == []


def bce(z, y):
    # log-sigmoid written out so the oracle shares no code with the library
    return -np.mean([yi * -np.log1p(np.exp(-zi)) + (1 - yi) * -np.log1p(np.exp(zi)) for zi, yi in zip(z, y)])


def per_utterance_sid(model, batch):
    logits = []
    with torch.no_grad():
        for f in batch.features:
            feats, lengths = model.pad_features([f])
            enc, _, enc_len = model.encode(feats, lengths)
            logits.append(float(model.sid_from_encoder(enc, enc_len)[0]))
    return logits


def test_masking_ignores_typical_utterances():
    model = small_model()
    rng = np.random.default_rng(5)
    for _ in range(5):
        el = random_batch(rng, 3, [SpeechType.EL] * 3)
        k = int(rng.integers(1, 4))
        typ = random_batch(rng, k, [SpeechType.TYPICAL] * k)
        mixed = RecognitionBatch(el.features + typ.features, el.transcripts + typ.transcripts, el.speech_types + typ.speech_types)
        with torch.no_grad():
            a = compute_loss(model, el, "intermediate")
            b = compute_loss(model, mixed, "intermediate")
        assert a.ctc.item() == b.ctc.item()
        assert a.attn.item() == b.attn.item()
        y = [1.0 if s == SpeechType.EL else 0.0 for s in mixed.speech_types]
        assert abs(b.sid.item() - bce(per_utterance_sid(model, mixed), y)) <= 1e-9


def test_all_el_batch_is_sid_plus_hybrid():
    model = small_model(1)
    batch = random_batch(np.random.default_rng(2), 4, [SpeechType.EL] * 4)
    with torch.no_grad():
        inter = compute_loss(model, batch, "intermediate", sid_weight=0.7)
        plain = compute_loss(model, batch, "standard")
    want = 0.7 * bce(per_utterance_sid(model, batch), [1.0] * 4) + plain.total.item()
    assert abs(inter.total.item() - want) <= 1e-9


def test_no_mask_mode_trains_on_typical_text():
    model = small_model(2)
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 4, [SpeechType.EL, SpeechType.EL, SpeechType.TYPICAL, SpeechType.TYPICAL])
    with torch.no_grad():
        masked = compute_loss(model, batch, "intermediate")
        unmasked = compute_loss(model, batch, "intermediate_no_mask")
    assert masked.ctc.item() != unmasked.ctc.item()


def test_sid_loss_values():
    z = torch.zeros(3, dtype=torch.float64)
    assert abs(sid_loss(z, ["EL", "TYPICAL", "EL"]).item() - math.log(2)) < 1e-12
    with pytest.raises(EmptyBatch):
        sid_loss(torch.zeros(0), [])
    with pytest.raises(ShapeError):
        sid_loss(torch.zeros(2), ["EL"])


def test_compute_loss_errors():
    model = small_model()
    with pytest.raises(EmptyBatch):
        compute_loss(model, RecognitionBatch([], []))
    with pytest.raises(ConfigError):
        compute_loss(model, random_batch(np.random.default_rng(0), 1, ["EL"]), "bogus")


def relative_grad_error(model, loss_fn, n_checks=40, eps=1e-6, seed=0):
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    flat = [(p, i) for p in params for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(n_checks, len(flat)), replace=False)
    offsets = np.cumsum([0] + [p.numel() for p in params])
    index = {id(p): o for p, o in zip(params, offsets)}
    num, ana = [], []
    with torch.no_grad():
        for k in picks:
            p, i = flat[k]
            view = p.view(-1)
            old = view[i].item()
            view[i] = old + eps
            up = loss_fn().item()
            view[i] = old - eps
            down = loss_fn().item()
            view[i] = old
            num.append((up - down) / (2 * eps))
            ana.append(analytic[index[id(p)] + i].item())
    num, ana = np.array(num), np.array(ana)
    assert np.linalg.norm(num) > 0, "degenerate check: every sampled gradient is zero"
    return np.linalg.norm(num - ana) / np.linalg.norm(num)


def test_recognition_gradient_check():
    torch.manual_seed(0)
    model = Recognizer(RecognizerConfig(**TINY)).double()
    assert sum(p.numel() for p in model.parameters()) <= 1000
    batch = random_batch(np.random.default_rng(4), 3, ["EL", "TYPICAL", "EL"], n_mels=4, vocab=3)
    model.set_normalizer(batch.features)
    err = relative_grad_error(model, lambda: compute_loss(model, batch, "intermediate").total)
    assert err <= 1e-3


def test_bnf_shape_and_determinism(rng):
    model = small_model(subsampling=4)
    for T in (8, 13, 40):
        x = rng.standard_normal((T, 6))
        a = extract_bnf(model, x)
        assert a.shape == (math.ceil(T / 4), 8)
        assert np.array_equal(a, extract_bnf(model, x))
    assert [subsampled_length(n, 4) for n in (1, 4, 5, 9)] == [1, 1, 2, 3]


def test_beam_one_without_ctc_is_greedy(rng):
    model = small_model(3)
    for _ in range(3):
        x = rng.standard_normal((20, 6))
        assert joint_beam_search(model, x, beam=1, ctc_weight=0.0, max_len=6) == attention_greedy(model, x, max_len=6)
    with pytest.raises(ConfigError):
        joint_beam_search(model, x, beam=0)


def test_save_load_round_trip(tmp_path, rng):
    model = small_model(4)
    model.save(tmp_path / "r.ckpt")
    back = Recognizer.load(tmp_path / "r.ckpt").double()
    x = rng.standard_normal((16, 6))
    assert np.allclose(extract_bnf(model, x), extract_bnf(back, x), atol=1e-6)


def test_all_typical_batch_is_sid_only():
    model = small_model(5)
    batch = random_batch(np.random.default_rng(6), 3, [SpeechType.TYPICAL] * 3)
    with torch.no_grad():
        br = compute_loss(model, batch, "intermediate")
    assert br.ctc.item() == 0.0 and br.attn.item() == 0.0
    assert br.total.item() == br.sid.item()
    assert br.n_el == 0


def test_zero_epochs_leaves_model_unchanged(tiny_corpus):
    from elenhance.features import FeatureStore
    from elenhance.recognition.train import RecognitionRecipe, train_stage

    model = Recognizer(RecognizerConfig(d_model=16, heads=2, ff=32, enc_layers=1, dec_layers=1))
    recipe = RecognitionRecipe("noop", {"group": "main", "split": "train"}, epochs=0)
    out = train_stage(model, recipe, FeatureStore(tiny_corpus)).model
    assert out is not model
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), out.state_dict().values()))
