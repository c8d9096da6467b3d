"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line. The trained
toy model is built once per module; set STREAMTTS_ACCEPTANCE_CHECKPOINT to
reuse an existing checkpoint instead of training.
"""
import os
import queue
import time

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from streamtts.align import ForcedAlignment, decode_tokens, encode_alignment, ideal_coverage
from streamtts.bench import FeedSchedule, bench
from streamtts.codec import CodecSpec, WavStreamWriter, decode_frames, encode_frames, write_wav
from streamtts.corpus import Corpus, CorpusSpec
from streamtts.engine import (DecodeConsumer, Prompt, StreamEngine, delay_ledger_violations,
                              offline_generate)
from streamtts.grid import NUM_CODEBOOKS
from streamtts.model import ModelConfig, Model, _block, causal_matrix, lookahead_matrix
from streamtts.phonemizer import default_lexicon, phonemize_word
from streamtts.tensor import ParameterStore, Tensor, backward, mul, sum_all
from streamtts.trainer import (TrainConfig, ablation_grid, evaluate, format_ablation, load_model,
                               make_chunks, train, utterance_chunks)

NUM_UTTERANCES, NUM_HELD_OUT = 2000, 200


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="module")
def full_corpus():
    return Corpus(CorpusSpec(num_utterances=NUM_UTTERANCES))


@pytest.fixture(scope="module")
def split(full_corpus):
    utts = [full_corpus.utterance(s) for s in range(NUM_UTTERANCES)]
    return utts[:-NUM_HELD_OUT], utts[-NUM_HELD_OUT:]


@pytest.fixture(scope="module")
def trained(split, tmp_path_factory):
    """(model, train seconds or None, metrics list) for the toy preset."""
    reuse = os.environ.get("STREAMTTS_ACCEPTANCE_CHECKPOINT")
    if reuse:
        model, _ = load_model(reuse)
        return model, None, []
    train_utts, _ = split
    cfg = TrainConfig()
    chunks = make_chunks(train_utts, cfg.chunk_frames, cfg.seed)
    model = Model(ModelConfig.toy(), seed=cfg.seed)
    res = train(cfg, model, chunks, out_dir=tmp_path_factory.mktemp("toy"), log_every=200)
    return model, res.seconds, res.metrics


@pytest.fixture(scope="module")
def inference(trained):
    return trained[0].inference()


# ---------------------------------------------------------------- 1

def fuzzed_alignment(rng):
    m = int(rng.integers(1, 40))
    if rng.random() < 0.5:
        durs = rng.uniform(0.5, 3.0, size=m)
    else:
        durs = rng.exponential(0.8, size=m) + 1e-3
    ends = np.cumsum(durs)
    return ForcedAlignment(rng.integers(2, 32, size=m).tolist(), ends.tolist())


def test_criterion_1_alignment_codec(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad, exact_checked = 0, 0
    for _ in range(10_000):
        a = fuzzed_alignment(rng)
        cov = decode_tokens(encode_alignment(a), a.num_phonemes)
        ok = cov[0].b == 1 and cov[-1].e == a.num_phonemes
        ok &= all(y.b >= x.b and y.e >= x.e and y.b in (x.e, x.e + 1) for x, y in zip(cov, cov[1:]))
        ideal = ideal_coverage(a)
        if max(c.e - c.b + 1 for c in ideal) <= 2:
            exact_checked += 1
            ok &= [(c.b, c.e) for c in cov] == [(c.b, c.e) for c in ideal]
        bad += not ok
    secs = time.perf_counter() - t0
    passed = bad == 0 and secs < 10 and exact_checked >= 1000
    report(capsys, 1, passed, f"mismatches={bad} exact_subset={exact_checked} runtime={secs:.1f}s")
    assert passed


# ---------------------------------------------------------------- 2

def block_fd_error(rng):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.choice([2, 4]))
    t = int(rng.integers(2, 6))
    ff = int(rng.integers(2, 9))
    lead = (2,) if rng.random() < 0.5 else ()
    if rng.random() < 0.5:
        mask = causal_matrix(t)
    else:
        mask = lookahead_matrix(rng.integers(0, 4, size=lead + (t,)))
        if lead:
            mask = mask[:, None]
    store = ParameterStore()
    shapes = {"attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
              "ffn_norm": (d,), "w1": (d, ff), "w3": (d, ff), "w2": (ff, d)}
    for name, shape in shapes.items():
        init = 1 + 0.1 * rng.standard_normal(shape) if name.endswith("norm") else \
            rng.standard_normal(shape) / np.sqrt(shape[0])
        store.add("b." + name, init)
    x = rng.standard_normal(lead + (t, d))
    proj = rng.standard_normal(lead + (t, d))
    pos = np.arange(t)

    def loss(xt):
        return sum_all(mul(_block(xt, store, "b.", heads, mask, pos, 1e-6, 10000.0), Tensor(proj)))

    xt = Tensor(x, requires_grad=True)
    store.zero_grad()
    backward(loss(xt))
    worst = rel_error(xt.grad, numeric_grad(lambda: float(loss(Tensor(x)).data), x))
    for name in store.names():
        p = store[name]
        worst = max(worst, rel_error(p.grad, numeric_grad(lambda: float(loss(Tensor(x)).data), p.data)))
    return worst


def test_criterion_2_gradient_correctness(capsys):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    errors = [block_fd_error(rng) for _ in range(24)]
    secs = time.perf_counter() - t0
    passed = max(errors) < 1e-4 and secs < 120
    report(capsys, 2, passed, f"configs={len(errors)} max_rel_err={max(errors):.2e} runtime={secs:.1f}s")
    assert passed


# ---------------------------------------------------------------- 3

def stream_all_up_front(model, u, temperature, seed, **kw):
    eng = StreamEngine(model, speaker=u.speaker, temperature=temperature, seed=seed, **kw)
    for w in u.words:
        eng.push_word(w)
    eng.close()
    eng.run()
    return eng


def test_criterion_3_streaming_equivalence(capsys, inference, split):
    _, held = split
    t0 = time.perf_counter()
    mismatches = 0
    for temperature in (0.0, 0.8):
        for k, u in enumerate(held[:100]):
            eng = stream_all_up_front(inference, u, temperature, seed=k)
            off, durs = offline_generate(inference, eng.state.phonemes, u.speaker, temperature, 0, k)
            mismatches += not (np.array_equal(eng.token_frames(), off) and durs == eng.state.durations)
    secs = time.perf_counter() - t0
    passed = mismatches == 0 and secs < 120
    report(capsys, 3, passed, f"utterances=100x2 mismatches={mismatches} runtime={secs:.1f}s")
    assert passed


# ---------------------------------------------------------------- 4

REPLACEMENTS = ["zebra", "quantum", "yellow", "marble", "violin"]


def causality_trial(model, u, seed, rng):
    """None when the utterance offers no word beyond the horizon, else violation flag."""
    eng = StreamEngine(model, speaker=u.speaker, temperature=0.8, seed=seed)
    for w in u.words:
        eng.push_word(w)
    consumed = []
    while eng.try_step() is not None:
        consumed.append(eng.state.consumed_max)
    extents = eng.state.word_extents
    candidates = [(r, w) for r, cm in enumerate(consumed, start=1)
                  for w, (start, _) in enumerate(extents) if start >= cm + 10]
    if not candidates:
        return None
    r, w = candidates[int(rng.integers(len(candidates)))]
    lex = default_lexicon()
    old = phonemize_word(u.words[w], lex)
    new = next(x for x in REPLACEMENTS if phonemize_word(x, lex) != old)
    words = list(u.words)
    words[w] = new
    other = StreamEngine(model, speaker=u.speaker, temperature=0.8, seed=seed)
    for x in words:
        other.push_word(x)
    for _ in range(r):
        other.try_step()
    ref, got = eng.state.frames[:r], other.state.frames
    if len(got) != r:
        return True
    return any(a.index != b.index or (a.tokens is None) != (b.tokens is None)
               or (a.tokens is not None and not np.array_equal(a.tokens, b.tokens)) for a, b in zip(ref, got))


def test_criterion_4_causality(capsys, inference, split):
    train_utts, held = split
    rng = np.random.default_rng(4)
    trials = violations = 0
    for k, u in enumerate(held + train_utts):
        if trials == 100:
            break
        v = causality_trial(inference, u, k, rng)
        if v is None:
            continue
        trials += 1
        violations += bool(v)
    passed = trials == 100 and violations == 0
    report(capsys, 4, passed, f"trials={trials} violations={violations}")
    assert passed


# ---------------------------------------------------------------- 5

def test_criterion_5_acoustic_delay_ledger(capsys, inference, split, full_corpus):
    _, held = split
    problems = []
    runs = 0
    for k, u in enumerate(held):
        eng = stream_all_up_front(inference, u, 0.8, seed=k)
        problems += delay_ledger_violations(eng)
        runs += 1
    for k in range(20):
        p = Prompt.from_utterance(held[k])
        u = held[-1 - k]
        eng = StreamEngine(inference, speaker=p.speaker, seed=k)
        eng.prefill_prompt(p)
        for w in u.words:
            eng.push_word(w)
        eng.close()
        eng.run()
        problems += delay_ledger_violations(eng)
        runs += 1
    passed = not problems
    report(capsys, 5, passed, f"runs={runs} violations={len(problems)}")
    assert passed, problems[:5]


# ---------------------------------------------------------------- 6

def test_criterion_6_codec_exactness(capsys, inference, split, tmp_path):
    t0 = time.perf_counter()
    va = CodecSpec().acoustic_vocab
    frames = np.array([[(v + 7 * q) % va for q in range(NUM_CODEBOOKS)] for v in range(va)])
    pairs = {(q, int(frames[v, q])) for v in range(va) for q in range(NUM_CODEBOOKS)}
    exhaustive = len(pairs) == va * NUM_CODEBOOKS and np.array_equal(encode_frames(decode_frames(frames)), frames)
    _, held = split
    stream_ok = True
    for k, u in enumerate(held[:20]):
        fifo = queue.Queue(maxsize=4)
        consumer = DecodeConsumer(fifo)
        consumer.start()
        eng = stream_all_up_front(inference, u, 0.8, seed=k, codec=CodecSpec(), sink=fifo)
        fifo.put(None)
        consumer.join(timeout=60)
        offline = decode_frames(eng.token_frames())
        streamed = np.concatenate([f.audio for f in eng.decodable_frames()])
        stream_ok &= consumer.error is None and streamed.tobytes() == offline.tobytes()
        stream_ok &= consumer.audio().tobytes() == offline.tobytes()
        if k == 0:
            write_wav(tmp_path / "a.wav", offline)
            with WavStreamWriter(tmp_path / "b.wav") as w:
                for f in eng.decodable_frames():
                    w.write(f.audio)
            stream_ok &= (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    secs = time.perf_counter() - t0
    passed = exhaustive and stream_ok and secs < 60
    report(capsys, 6, passed, f"exhaustive={exhaustive} streaming_equal={stream_ok} runtime={secs:.1f}s")
    assert passed


# ---------------------------------------------------------------- 7

def test_criterion_7_desk_scale_training(capsys, trained, split):
    model, seconds, metrics = trained
    _, held = split
    res = evaluate(model, utterance_chunks(held), held[:100])
    ok = model.num_params() <= 1_000_000
    ok &= res["joint_accuracy"] >= 0.90 and res["per"] <= 0.05
    if seconds is not None:
        ok &= seconds < 30 * 60
        losses = [m["loss_tt"] + m["loss_dt"] for m in metrics]
        ok &= np.mean(losses[-50:]) < 0.5 * np.mean(losses[:50])
    took = "reused" if seconds is None else f"{seconds / 60:.1f}min"
    report(capsys, 7, ok, f"params={model.num_params()} joint_acc={res['joint_accuracy']:.4f} "
                          f"per={res['per']:.4f} dt_acc={res['dt_accuracy']:.4f} train={took}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_ablation_grid(capsys, trained, split):
    model, _, _ = trained
    train_utts, held = split
    tcfg = TrainConfig(batch_size=8)
    chunks = make_chunks(train_utts, tcfg.chunk_frames, tcfg.seed)
    rows = ablation_grid(ModelConfig.toy(), tcfg, chunks, utterance_chunks(held[:50]), held[:20],
                         max_steps=120, dt_init=model.params.arrays())
    table = format_ablation(rows)
    combos = {(r["freeze_dt"], r["use_speaker"]) for r in rows}
    passed = len(rows) == 4 and len(combos) == 4 and len(table.splitlines()) == 5
    report(capsys, 8, passed, "rows=4")
    with capsys.disabled():
        print(table)
    assert passed


# ---------------------------------------------------------------- 9

def test_criterion_9_real_time_factor(capsys, inference, split):
    _, held = split
    workload = [FeedSchedule.all_at_once(u.words) for u in held[:3]]
    rep = bench(inference, workload, runs=10)
    median = rep["rtf"]["median"]
    passed = rep["completed"] == 30 and median < 1.0
    report(capsys, 9, passed, f"rtf_median={median:.3f} rtf_p95={rep['rtf']['p95']:.3f} "
                              f"fpl_median_ms={rep['fpl_ms']['median']:.1f}")
    assert passed
