"""Command-line entry point: corpus, train, synth, bench, eval."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import FeedSchedule, bench, read_word_feed, run_once
from .codec import CodecSpec, decode_frames, write_wav
from .corpus import Corpus, CorpusSpec, SemanticMap, read_manifest, write_manifest
from .engine import MonotonicClock, Prompt, VirtualClock, read_token_log, write_token_log
from .errors import GenerationFault, ParseError, ValidationError
from .model import Model, ModelConfig
from .trainer import (TrainConfig, ablation_grid, evaluate, format_ablation, load_model, make_chunks,
                      train, utterance_chunks)

log = logging.getLogger("streamtts")

EXIT_OK, EXIT_VALIDATION, EXIT_FAULT, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.jsonl"


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """Flags beat the config file, which beats defaults."""
    out = dict(defaults)
    out.update({k: v for k, v in file_cfg.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def _parse_delays(text: str | None) -> dict | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ValidationError(f"bad stage delay {part!r}; use stage=ms") from exc
    return out


def _corpus_from_dir(path) -> tuple[Corpus, list[dict]]:
    spec, records = read_manifest(Path(path) / MANIFEST)
    return Corpus(spec), records


def _split(records: list[dict], holdout_frac: float) -> tuple[list[int], list[int]]:
    seeds = [r["utt_seed"] for r in records]
    n_hold = int(round(len(seeds) * holdout_frac))
    return seeds[:len(seeds) - n_hold], seeds[len(seeds) - n_hold:]


# ---------------------------------------------------------------- commands

def cmd_corpus(args) -> int:
    spec = CorpusSpec.from_json(_merge(CorpusSpec().to_json(), _load_json(args.spec),
                                       {"seed": args.seed, "num_utterances": args.num_utterances,
                                        "num_speakers": args.num_speakers}))
    corpus = Corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = corpus.manifest_records()
    write_manifest(out / MANIFEST, spec, records)
    (out / "corpus_spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    print(json.dumps({"manifest": str(out / MANIFEST), "utterances": len(records)}))
    return EXIT_OK


def cmd_train(args) -> int:
    corpus, records = _corpus_from_dir(args.corpus)
    file_cfg = _load_json(args.config)
    tcfg = TrainConfig.from_json(_merge(TrainConfig().to_json(), file_cfg.get("train", file_cfg), {
        "epochs": args.epochs, "peak_lr": args.peak_lr, "batch_size": args.batch_size,
        "chunk_frames": args.chunk_frames, "seed": args.seed,
        "freeze_dt": True if args.freeze_dt else None,
        "use_speaker": False if args.no_speaker else None,
        "checkpoint_every": args.checkpoint_every}))
    mcfg = ModelConfig.from_json(_merge(ModelConfig.toy().to_json(), file_cfg.get("model", {}), {
        "use_speaker": tcfg.use_speaker, "semantic_vocab": corpus.spec.semantic_vocab,
        "acoustic_vocab": corpus.spec.acoustic_vocab, "speaker_dim": corpus.spec.speaker_dim,
        "phoneme_vocab": len(corpus.inventory)}))
    train_seeds, hold_seeds = _split(records, args.holdout_frac)
    utts = [corpus.utterance(s) for s in train_seeds]
    chunks = make_chunks(utts, tcfg.chunk_frames, tcfg.seed)
    log.info("%d utterances -> %d chunks of %d frames", len(utts), len(chunks), tcfg.chunk_frames)
    model = Model(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg.save(out / "model_config.json")
    (out / "train_config.json").write_text(json.dumps(tcfg.to_json(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    res = train(tcfg, model, chunks, out_dir=out, resume=args.resume, max_steps=args.max_steps)
    summary = {"checkpoint": str(res.checkpoint_path), "steps": res.step, "seconds": res.seconds,
               "params": model.num_params(), "holdout_seeds": [hold_seeds[0], hold_seeds[-1]] if hold_seeds else []}
    if res.metrics:
        summary["final_loss_tt"] = res.metrics[-1]["loss_tt"]
        summary["final_loss_dt"] = res.metrics[-1]["loss_dt"]
    print(json.dumps(summary))
    return EXIT_OK


def _speaker(args, model_cfg: ModelConfig):
    if args.speaker_id is None:
        return None
    if not args.corpus:
        raise ValidationError("--speaker-id needs --corpus")
    corpus, _ = _corpus_from_dir(args.corpus)
    return corpus.speaker_vector(args.speaker_id)


def _prompt(args) -> Prompt | None:
    if args.prompt_seed is None:
        return None
    if not args.corpus:
        raise ValidationError("--prompt-seed needs --corpus")
    corpus, _ = _corpus_from_dir(args.corpus)
    return Prompt.from_utterance(corpus.utterance(args.prompt_seed))


def _words(args) -> list[str]:
    if args.text is not None:
        return args.text.split()
    if getattr(args, "feed_file", None):
        return []
    return read_word_feed(sys.stdin)


def cmd_synth(args) -> int:
    spec = CodecSpec()
    if args.replay:
        frames, _, _ = read_token_log(args.replay)
        write_wav(args.wav, decode_frames(frames, spec), spec.sample_rate)
        print(json.dumps({"frames": len(frames), "wav": args.wav}))
        return EXIT_OK
    if args.checkpoint is None:
        raise ValidationError("--checkpoint is required unless --replay is given")
    model, _ = load_model(args.checkpoint)
    if not 0 <= args.la_cap <= model.config.lookahead_cap:
        raise ValidationError(f"--la-cap must be within 0..{model.config.lookahead_cap}")
    if args.feed_file:
        schedule = FeedSchedule.from_file(args.feed_file)
    else:
        schedule = FeedSchedule.build(_words(args), args.mode, args.interval_ms)
    delays = _parse_delays(args.virtual_clock)
    clock = VirtualClock(delays) if delays is not None else MonotonicClock()
    eng, res = run_once(model.inference(), schedule, speaker=_speaker(args, model.config),
                        temperature=args.temperature, top_k=args.top_k, seed=args.seed,
                        la_cap=args.la_cap, clock=clock, prompt=_prompt(args))
    if res.error:
        if "GenerationFault" in res.error:
            raise GenerationFault(res.error)
        raise ValidationError(res.error)
    frames = eng.decodable_frames()
    if args.wav:
        audio = np.concatenate([f.audio for f in frames])
        write_wav(args.wav, audio, spec.sample_rate)
    if args.token_log:
        write_token_log(args.token_log, frames)
    rep = res.report
    print(json.dumps({"frames": rep["frames"], "fpl_ms": rep["fpl_ms"], "rtf": rep["rtf"],
                      "counts": rep["counts"], "violations": res.violations}))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = load_model(args.checkpoint)
    workload = []
    for line in Path(args.workload).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            workload.append(FeedSchedule.build(line.split(), args.mode, args.interval_ms))
    if not workload:
        raise ValidationError(f"{args.workload}: empty workload")
    echo = {"checkpoint": args.checkpoint, "workload": args.workload, "runs": args.runs, "mode": args.mode,
            "interval_ms": args.interval_ms, "temperature": args.temperature, "la_cap": args.la_cap,
            "virtual_clock": args.virtual_clock, "model": model.config.to_json()}
    report = bench(model.inference(), workload, runs=args.runs,
                   virtual_delays_ms=_parse_delays(args.virtual_clock), config_echo=echo,
                   temperature=args.temperature, seed=args.seed, la_cap=args.la_cap)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus, records = _corpus_from_dir(args.corpus)
    _, hold = _split(records, args.holdout_frac)
    hold = hold[:args.utterances] if args.utterances else hold
    utts = [corpus.utterance(s) for s in hold]
    smap = SemanticMap(len(corpus.inventory), corpus.spec.semantic_vocab)
    if args.ablation:
        train_seeds, _ = _split(records, args.holdout_frac)
        tcfg = TrainConfig.from_json(_load_json(args.config).get("train", {}))
        chunks = make_chunks([corpus.utterance(s) for s in train_seeds], tcfg.chunk_frames, tcfg.seed)
        mcfg = ModelConfig.toy(semantic_vocab=corpus.spec.semantic_vocab,
                               acoustic_vocab=corpus.spec.acoustic_vocab,
                               speaker_dim=corpus.spec.speaker_dim, phoneme_vocab=len(corpus.inventory))
        dt_init = None
        if args.checkpoint:
            dt_init = load_model(args.checkpoint)[0].params.arrays()
        rows = ablation_grid(mcfg, tcfg, chunks, utterance_chunks(utts), utts,
                             max_steps=args.max_steps, dt_init=dt_init)
        print(format_ablation(rows))
        return EXIT_OK
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required")
    model, _ = load_model(args.checkpoint)
    metrics = evaluate(model, utterance_chunks(utts), utts, smap)
    print(json.dumps(metrics))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamtts", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="generate a synthetic corpus manifest")
    c.add_argument("--spec", help="CorpusSpec JSON file")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--num-utterances", type=int)
    c.add_argument("--num-speakers", type=int)
    c.set_defaults(func=cmd_corpus)

    t = sub.add_parser("train", help="train the toy model on a corpus")
    t.add_argument("--corpus", required=True, help="directory written by 'corpus'")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help='JSON with optional "train" and "model" sections')
    t.add_argument("--epochs", type=int)
    t.add_argument("--peak-lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--chunk-frames", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--freeze-dt", action="store_true")
    t.add_argument("--no-speaker", action="store_true")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--holdout-frac", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    def gen_opts(g):
        g.add_argument("--checkpoint")
        g.add_argument("--temperature", type=float, default=0.0)
        g.add_argument("--top-k", type=int, default=0)
        g.add_argument("--seed", type=int, default=0)
        g.add_argument("--la-cap", type=int, default=10)
        g.add_argument("--mode", choices=["all", "word"], default="all",
                       help="all words up front, or one word per --interval-ms")
        g.add_argument("--interval-ms", type=float, default=0.0)
        g.add_argument("--virtual-clock", help="stage delays, e.g. pt=1,tt=2,dt=3,decode=0.5")

    s = sub.add_parser("synth", help="stream a word feed (stdin, one word per line, '<close>' ends)")
    gen_opts(s)
    s.add_argument("--text", help="words to speak instead of reading stdin")
    s.add_argument("--feed-file", help="word<TAB>offset_ms schedule file")
    s.add_argument("--corpus", help="corpus directory for --speaker-id / --prompt-seed")
    s.add_argument("--speaker-id", type=int)
    s.add_argument("--prompt-seed", type=int)
    s.add_argument("--wav")
    s.add_argument("--token-log")
    s.add_argument("--replay", help="decode an existing token log to --wav instead of generating")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="latency benchmark over a workload file (one sentence per line)")
    gen_opts(b)
    b.add_argument("--workload", required=True)
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="held-out accuracies and PER, or the ablation grid")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--utterances", type=int, default=100)
    e.add_argument("--holdout-frac", type=float, default=0.1)
    e.add_argument("--ablation", action="store_true")
    e.add_argument("--config")
    e.add_argument("--max-steps", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GenerationFault as exc:
        print(f"generation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (ValidationError, ParseError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
