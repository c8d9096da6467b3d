import numpy as np
import pytest

from conftest import rel_error
from streamtts.align import GO2, DurationToken
from streamtts.errors import SamplingError, StateError, ValidationError
from streamtts.model import (InferenceModel, JointToken, Model, ModelConfig, duration_allowed,
                             forward_train, make_batch, sample_index, sample_joint,
                             teacher_forced_nll)
from streamtts.tensor import Tensor, backward, cross_entropy


def tiny_config(**kw):
    base = dict(pt_dim=8, pt_heads=2, pt_ff=8, tt_dim=8, tt_heads=2, tt_ff=8,
                dt_dim=8, dt_heads=2, dt_ff=8, pt_layers=1, tt_layers=1, dt_layers=1)
    base.update(kw)
    return ModelConfig(**base)


def items(corpus, seeds):
    return [(u.phonemes, u.durations, u.grid, u.speaker) for u in (corpus.utterance(s) for s in seeds)]


def test_config_invariants_and_json(tmp_path):
    cfg = ModelConfig.toy()
    assert cfg.joint_classes == 256 and cfg.pad_class == 256
    for bad in ({"codebooks": 8}, {"duration_vocab": 3}, {"lookahead_cap": 5}, {"tt_heads": 3}):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    cfg.save(tmp_path / "c.json")
    assert ModelConfig.load(tmp_path / "c.json") == cfg
    ref = ModelConfig.reference_scale()
    assert (ref.tt_layers, ref.tt_heads, ref.tt_dim, ref.tt_ff) == (12, 16, 1024, 4096)


def test_toy_model_under_one_million_params(toy_model):
    assert toy_model.num_params() < 1_000_000


def test_joint_token_bijection():
    for c in range(64 * 4):
        jt = JointToken.from_class(c, 64)
        assert jt.joint_class == c
    with pytest.raises(ValueError):
        JointToken.from_class(256, 64)


def test_sample_joint_argmax_example():
    logits = np.zeros(257)
    logits[23] = 5.0
    jt = sample_joint(logits, 0.0, 0, None)
    assert jt.semantic == 5 and jt.duration == GO2


def test_pad_class_never_sampled():
    logits = np.zeros(257)
    logits[256] = 100.0
    assert sample_joint(logits, 0.0).joint_class != 256


def test_seeded_sampling_repeatable():
    logits = np.zeros(257)
    a = [sample_joint(logits, 1.0, 0, np.random.default_rng(7)).joint_class for _ in range(3)]
    assert len(set(a)) == 1


def test_all_masked_raises():
    with pytest.raises(SamplingError):
        sample_index(np.zeros(4), 1.0, allowed=np.zeros(4, bool))
    with pytest.raises(SamplingError):
        sample_joint(np.zeros(257), 0.0, allowed=np.zeros(256, bool))


def test_sampling_frequencies_match_softmax():
    logits = np.array([0.3, -1.0, 1.2])
    p = np.exp(logits) / np.exp(logits).sum()
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.bincount([sample_index(logits, 1.0, 0, rng) for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_top_k_restricts_support():
    logits = np.array([5.0, 4.0, -1.0, -2.0])
    rng = np.random.default_rng(1)
    assert {sample_index(logits, 2.0, 2, rng) for _ in range(300)} == {0, 1}


def test_duration_mask():
    m = duration_allowed(2, allow_count2=False)
    assert m.tolist() == [True, False, True, False] * 2
    m = duration_allowed(1, allow_stay=False)
    assert m.tolist() == [False, False, True, True]


# ---------------------------------------------------------------- phoneme transformer

def test_pt_single_phoneme(toy_inference):
    a = toy_inference.pt_encode([7], [0])
    b = toy_inference.pt_encode([7, 9, 4], [0, 1, 0])[:1]
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        toy_inference.pt_encode([7], [-1])


def test_pt_final_embedding_stable_under_growth(toy_inference):
    rng = np.random.default_rng(0)
    ph = rng.integers(2, 32, size=40).tolist()
    la30 = [min(10, 29 - i) for i in range(30)]
    la40 = [min(10, 39 - i) for i in range(40)]
    e30 = toy_inference.pt_encode(ph[:30], la30)
    e40 = toy_inference.pt_encode(ph, la40)
    for i in range(20):
        assert np.array_equal(e30[i], e40[i])


def test_pt_masked_future(toy_inference):
    rng = np.random.default_rng(1)
    ph = rng.integers(2, 32, size=25).tolist()
    la = [min(10, 24 - i) for i in range(25)]
    base = toy_inference.pt_encode(ph, la)
    for i in range(0, 14):
        pert = list(ph)
        pert[i + 11] = 2 + (pert[i + 11] - 1) % 30
        out = toy_inference.pt_encode(pert, la)
        assert np.array_equal(out[:i + 1], base[:i + 1])


def test_pt_incremental_cache_matches_full(toy_inference):
    rng = np.random.default_rng(2)
    ph = rng.integers(2, 32, size=30).tolist()
    cache = toy_inference.new_pt_cache()
    for m in (3, 9, 17, 30):
        la = [min(10, m - 1 - i) for i in range(m)]
        inc = toy_inference.pt_encode(ph[:m], la, cache, finalize=max(0, m - 10))
        assert np.array_equal(inc, toy_inference.pt_encode(ph[:m], la))


# ---------------------------------------------------------------- temporal and depth transformers

def test_tt_shapes_and_clone_determinism(toy_inference):
    emb = toy_inference.pt_encode([4, 5, 6], [2, 1, 0])
    cache = toy_inference.new_tt_cache()
    toy_inference.tt_step(cache, 64, emb[0], emb[1])
    clones = [[c.clone() for c in cache] for _ in range(2)]
    outs = [toy_inference.tt_step(c, 3, emb[1], None)[1] for c in clones]
    assert outs[0].shape == (257,)
    assert np.array_equal(outs[0], outs[1])
    with pytest.raises(StateError):
        toy_inference.tt_step(cache, 3, emb[1], emb[2], position=5)


def test_tt_teacher_forced_cached_equals_full(toy_inference, corpus):
    u = corpus.utterance(3)
    m = len(u.phonemes)
    emb = toy_inference.pt_encode(u.phonemes, [min(10, m - 1 - i) for i in range(m)])
    from streamtts.align import decode_tokens
    cov = decode_tokens(u.durations, m)
    cache = toy_inference.new_tt_cache()
    rows, step_logits = [], []
    for t, c in enumerate(cov):
        prev = 64 if t == 0 else int(u.grid.semantic[t - 1])
        sb = emb[c.b] if c.b < m else None
        rows.append(toy_inference.tt_input(prev, emb[c.b - 1], sb))
        step_logits.append(toy_inference.tt_step(cache, prev, emb[c.b - 1], sb, position=t)[1])
    _, full = toy_inference.tt_full(rows)
    for a, b in zip(step_logits, full):
        assert np.array_equal(a, b)


def test_dt_generate_length_determinism_and_full(toy_inference):
    h = np.random.default_rng(0).standard_normal(64).astype(np.float32)
    spk = np.eye(16)[2]
    a = toy_inference.dt_generate(h, 5, spk)
    assert len(a) == 11 and a == toy_inference.dt_generate(h, 5, spk)
    logits = toy_inference.dt_logits_full(h, 5, spk, a)
    assert [int(np.argmax(r)) for r in logits] == a


def test_dt_depth_causality(toy_model):
    h = np.random.default_rng(1).standard_normal(64).astype(np.float32)
    spk = np.eye(16)[0]
    base = toy_model.inference().dt_generate(h, 9, spk, 0.8, np.random.default_rng(3))
    va = toy_model.config.acoustic_vocab
    for j in range(10):
        arrays = {k: v.copy() for k, v in toy_model.params.arrays().items()}
        arrays["dt.ac_emb"][j * va:(j + 1) * va] += 3.0
        out = InferenceModel(toy_model.config, arrays).dt_generate(h, 9, spk, 0.8, np.random.default_rng(3))
        assert out[:j + 1] == base[:j + 1]


# ---------------------------------------------------------------- losses

def test_uniform_heads_give_log_vocab(corpus):
    m = Model(ModelConfig.toy(), seed=0)
    m.params["tt.head"].data[:] = 0.0
    m.params["dt.heads"].data[:] = 0.0
    ltt, ldt = teacher_forced_nll(m, make_batch(m.config, items(corpus, [0, 1])))
    assert abs(float(ltt.data) - np.log(256)) < 1e-9
    assert abs(float(ldt.data) - np.log(64)) < 1e-9


def test_one_hot_logits_give_zero_loss(corpus):
    m = Model(ModelConfig.toy(), seed=0)
    b = make_batch(m.config, items(corpus, [2]))
    keep = b.tt_target >= 0
    onehot = np.zeros((1, b.tt_target.shape[1], 257))
    onehot[0, np.flatnonzero(keep[0]), b.tt_target[keep]] = 100.0
    assert float(cross_entropy(Tensor(onehot), b.tt_target, num_classes=256).data) < 1e-6


def test_loss_matches_hand_log_softmax(corpus):
    m = Model(tiny_config(), seed=1)
    b = make_batch(m.config, items(corpus, [4]))
    out = forward_train(m, b)
    z = out["tt_logits"].data[0, :, :256]
    t = b.tt_target[0]
    vals = []
    for i in range(len(t)):
        if t[i] < 0:
            continue
        row = z[i]
        vals.append(-(row[t[i]] - row.max() - np.log(np.sum(np.exp(row - row.max())))))
    assert abs(float(out["loss_tt"].data) - np.mean(vals)) < 1e-10
    zd = out["dt_logits"].data
    td = out["dt_targets"]
    lp = zd - zd.max(-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
    expect = -np.mean(np.take_along_axis(lp, td[..., None], -1))
    assert abs(float(out["loss_dt"].data) - expect) < 1e-10
    assert td.shape[1] == len(t) - 1


def test_inconsistent_batch_lists_offender(corpus):
    cfg = ModelConfig.toy()
    good = items(corpus, [0])[0]
    bad = (good[0][:2], good[1], good[2], good[3])
    with pytest.raises(ValidationError, match="item 1"):
        make_batch(cfg, [good, bad])


def test_full_model_gradient_finite_differences(corpus):
    m = Model(tiny_config(), seed=2)
    b = make_batch(m.config, items(corpus, [5, 6]))

    def loss_value():
        lt, ld = teacher_forced_nll(m, b)
        return float(lt.data) + float(ld.data)

    m.params.zero_grad()
    lt, ld = teacher_forced_nll(m, b)
    backward(lt + ld)
    rng = np.random.default_rng(0)
    worst = 0.0
    checked = 0
    for name in m.params.names():
        p = m.params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        num, ana = [], []
        for k in picks:
            old = flat[k]
            flat[k] = old + 1e-5
            fp = loss_value()
            flat[k] = old - 1e-5
            fm = loss_value()
            flat[k] = old
            num.append((fp - fm) / 2e-5)
            ana.append(p.grad.reshape(-1)[k])
            checked += 1
        worst = max(worst, rel_error(np.array(ana), np.array(num)))
    assert checked <= 2000
    assert worst < 1e-4


def test_model_save_load(tmp_path, toy_model):
    toy_model.save(tmp_path / "m.ckpt")
    back, meta = Model.load(tmp_path / "m.ckpt")
    assert back.config == toy_model.config
    for k, v in toy_model.params.arrays().items():
        assert back.params[k].data.tobytes() == v.tobytes()
