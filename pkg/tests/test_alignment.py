import numpy as np
import pytest
import torch

from elenhance.alignment import (
    AlignmentConfig,
    AlignmentModel,
    AlignStage,
    FeatureBank,
    StageRecipe,
    alignment_loss,
    convert,
    finetune_schedule,
    pair_entries,
    pretrain,
    renormalize_units,
    train_step,
)
from elenhance.alignment.model import stack_frames
from elenhance.errors import ConfigError, EmptyInput, ShapeError
from elenhance.features import FeatureStore

SMALL = dict(d_model=16, heads=2, enc_layers=1, dec_layers=1, ff=32, dropout=0.0, prenet_dropout=0.0)


def small(in_type="bnf", out_type="units", seed=0, n_mels=8, **kw):
    torch.manual_seed(seed)
    return AlignmentModel(AlignmentConfig.for_types(in_type, out_type, bnf_dim=6, n_units=5, n_mels=n_mels, **{**SMALL, **kw}))


def test_for_types_geometry():
    c = AlignmentConfig.for_types("mel", "mel")
    assert (c.input_stack, c.reduction, c.in_dim, c.out_dim) == (4, 2, 80, 80)
    c = AlignmentConfig.for_types("bnf", "units")
    assert (c.input_stack, c.reduction) == (1, 1)
    with pytest.raises(ConfigError):
        AlignmentConfig(in_type="units")


def test_stack_frames():
    x = np.arange(10.0).reshape(5, 2)
    s = stack_frames(x, 2)
    assert s.shape == (3, 4)
    assert np.array_equal(s[0], [0, 1, 2, 3]) and np.array_equal(s[2], [8, 9, 0, 0])
    assert stack_frames(x, 1) is x


def test_renormalize_units():
    out = renormalize_units(np.array([[0.2, -0.1, 0.6], [-1.0, -2.0, 0.0]]))
    assert np.allclose(out[0], [0.25, 0.0, 0.75])
    assert np.allclose(out[1], 1 / 3)


def test_decoder_is_causal(rng):
    torch.manual_seed(0)
    model = AlignmentModel(AlignmentConfig(in_dim=6, out_dim=5, reduction=2, **SMALL))
    model.eval()
    x = [rng.standard_normal((9, 6))]
    y = rng.dirichlet(np.ones(5), 10)
    y2 = y.copy()
    y2[6:] = rng.dirichlet(np.ones(5), 4)
    with torch.no_grad():
        a = model(x, [y]).frames[0]
        b = model(x, [y2]).frames[0]
    # step k predicts frames 2k, 2k+1 from targets before frame 2k; frames 6+ start at step 3
    assert torch.equal(a[:8], b[:8])
    assert not torch.equal(a[8:], b[8:])


def test_teacher_forced_training_fits_small_set(rng):
    model = small()
    xs = [rng.standard_normal((int(n), 6)) for n in (8, 11, 9)]
    ys = [rng.dirichlet(np.ones(5), int(n)) for n in (10, 12, 7)]
    model.set_normalizer(inputs=xs, outputs=ys)
    opt = torch.optim.Adam(model.parameters(), 3e-3)
    first = train_step(model, opt, xs, ys)["total"]
    for _ in range(150):
        last = train_step(model, opt, xs, ys)["total"]
    assert last < 0.5 * first


def test_loss_is_batch_order_invariant(rng):
    model = small(seed=1)
    model.eval()
    xs = [rng.standard_normal((n, 6)) for n in (5, 9)]
    ys = [rng.dirichlet(np.ones(5), n) for n in (7, 4)]
    with torch.no_grad():
        a = alignment_loss(model, xs, ys)["total"].item()
        b = alignment_loss(model, xs[::-1], ys[::-1])["total"].item()
    assert abs(a - b) < 1e-6


def test_convert_untrained_truncates(rng):
    model = small(seed=2, stop_pos_weight=1.0)
    with torch.no_grad():
        model.decoder["stop"].bias.fill_(-20.0)
    res = convert(model, rng.standard_normal((6, 6)), max_frames=7)
    assert res.truncated and len(res) == 7
    assert np.allclose(res.frames.sum(1), 1.0)
    with torch.no_grad():
        model.decoder["stop"].bias.fill_(20.0)
    res = convert(model, rng.standard_normal((6, 6)))
    assert not res.truncated and len(res) == 1
    with pytest.raises(EmptyInput):
        convert(model, np.zeros((0, 6)))
    with pytest.raises(ConfigError):
        convert(model, np.zeros((3, 6)), max_frames=0)
    with pytest.raises(ShapeError):
        convert(model, np.zeros((3, 7)))


def test_convert_mel_respects_reduction(rng):
    model = small("mel", "mel", seed=3)
    with torch.no_grad():
        model.decoder["stop"].bias.fill_(-20.0)
    res = convert(model, rng.standard_normal((12, 8)), max_frames=9)
    assert res.frames.shape == (9, 8) and res.steps == 5


@pytest.fixture(scope="module")
def bank(tiny_corpus):
    return FeatureBank(FeatureStore(tiny_corpus))


def test_pair_entries(tiny_corpus):
    pairs = pair_entries(tiny_corpus, {"group": "main", "speech_type": "EL", "split": "train"}, "parallel")
    index = tiny_corpus.by_id()
    assert len(pairs) == 6
    assert all(index[s].transcript == index[t].transcript and index[t].speech_type == "TYPICAL" for s, t in pairs)
    cross = pair_entries(tiny_corpus, {"group": "pool", "speakers": "pool02"}, "speaker:pool01")
    assert all(t.startswith("pool-pool01-") and index[s].transcript == index[t].transcript for s, t in cross)
    with pytest.raises(ConfigError):
        pair_entries(tiny_corpus, {"group": "main"}, "bogus")


def test_tts_then_frozen_ae(bank):
    model = small("mel", "mel", n_mels=80)
    with pytest.raises(ConfigError):
        pretrain(model, StageRecipe(AlignStage.PRETRAIN_AE, {"group": "main", "speech_type": "TYPICAL", "split": "train"}, epochs=1), bank)
    data = {"group": "main", "speech_type": "TYPICAL", "split": "train"}
    tts = pretrain(model, StageRecipe(AlignStage.PRETRAIN_TTS, data, epochs=1, batch_size=4), bank)
    ae = pretrain(tts, StageRecipe(AlignStage.PRETRAIN_AE, data, epochs=1, batch_size=4), bank)
    dec_before = {k: v for k, v in tts.state_dict().items() if k.startswith("decoder.")}
    dec_after = {k: v for k, v in ae.state_dict().items() if k.startswith("decoder.")}
    assert all(torch.equal(dec_before[k], dec_after[k]) for k in dec_before)
    enc_changed = any(not torch.equal(tts.state_dict()[k], ae.state_dict()[k]) for k in tts.state_dict() if k.startswith("encoder_prenet."))
    assert enc_changed
    assert [s["stage"] for s in ae.meta["lineage"]] == ["PRETRAIN_TTS", "PRETRAIN_AE"]


def test_finetune_order_enforced(bank):
    model = small("mel", "mel", n_mels=80)
    el = {"group": "main", "speech_type": "EL", "split": "train"}
    ft = [StageRecipe(AlignStage.FT_SYNTHETIC_EL, el, epochs=0), StageRecipe(AlignStage.FT_TARGET_EL, el, epochs=0)]
    with pytest.raises(ConfigError):
        finetune_schedule(model, ft, bank)  # not pretrained
    pre = pretrain(model, StageRecipe(AlignStage.PRETRAIN_PARALLEL_VC, el, epochs=0), bank)
    with pytest.raises(ConfigError):
        finetune_schedule(pre, ft[::-1], bank)
    final, stages = finetune_schedule(pre, ft, bank)
    assert [s["stage"] for s in final.meta["lineage"]] == ["PRETRAIN_PARALLEL_VC", "FT_SYNTHETIC_EL", "FT_TARGET_EL"]
    assert set(stages) == {"FT_SYNTHETIC_EL", "FT_TARGET_EL"}


def test_checkpoint_round_trip(tmp_path, rng):
    model = small(seed=5)
    model.meta = {"lineage": []}
    model.save(tmp_path / "a.ckpt")
    back = AlignmentModel.load(tmp_path / "a.ckpt")
    src = rng.standard_normal((5, 6))
    assert np.array_equal(convert(model, src, max_frames=6).frames, convert(back, src, max_frames=6).frames)


def test_softmax_unit_head_loss_is_frame_l1_distance(rng):
    model = small()
    model.eval()
    xs = [rng.standard_normal((7, 6)), rng.standard_normal((4, 6))]
    ys = [rng.dirichlet(np.ones(5), 6), rng.dirichlet(np.ones(5), 3)]
    model.set_normalizer(xs, ys)
    with torch.no_grad():
        out = model(xs, ys)
        loss = alignment_loss(model, xs, ys)
    probs = out.frames.numpy()
    assert np.allclose(probs.sum(-1), 1.0, atol=1e-6) and (probs >= 0).all()
    want = np.mean([np.abs(probs[i, : len(y)] - y).sum(1).mean() for i, y in enumerate(ys)])
    assert abs(loss["l1"].item() - want) < 1e-5


def test_linear_unit_head_regresses_zscores(rng):
    model = small(unit_head="linear")
    model.eval()
    xs = [rng.standard_normal((5, 6))]
    ys = [rng.dirichlet(np.ones(5), 4)]
    model.set_normalizer(xs, ys)
    with torch.no_grad():
        out = model(xs, ys).frames[0].numpy()
        l1 = alignment_loss(model, xs, ys)["l1"].item()
    z = (ys[0] - ys[0].mean(0)) / (ys[0].std(0) + 1e-5)
    assert abs(l1 - np.abs(out - z).mean()) < 1e-5
    with pytest.raises(ConfigError):
        small(unit_head="sparsemax")
