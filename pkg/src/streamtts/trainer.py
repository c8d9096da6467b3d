"""Chunked teacher-forced training, evaluation and the 2x2 ablation grid."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .align import DurationToken, decode_tokens
from .corpus import SemanticMap, Utterance, phoneme_error_rate
from .engine import StreamEngine
from .errors import NonFiniteLossError, ValidationError
from .grid import NUM_CODEBOOKS, TokenGrid
from .model import Batch, Model, ModelConfig, forward_train, make_batch
from .tensor import backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_steps: int | None = None       # None: one epoch
    epochs: int = 30
    batch_size: int = 8
    chunk_frames: int = 64
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    dt_columns_per_chunk: int = 16        # 0 trains on every column
    freeze_dt: bool = False
    use_speaker: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.chunk_frames < 8:
            raise ValueError("chunk_frames must be at least 8")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def steps_per_epoch(self, num_chunks: int) -> int:
        return math.ceil(num_chunks / self.batch_size)

    def total_steps(self, num_chunks: int) -> int:
        return self.epochs * self.steps_per_epoch(num_chunks)

    def warmup(self, num_chunks: int) -> int:
        w = self.steps_per_epoch(num_chunks) if self.warmup_steps is None else self.warmup_steps
        if w > self.total_steps(num_chunks):
            raise ValueError("warmup span exceeds the total number of steps")
        return w

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in obj.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------- chunks

@dataclass
class Chunk:
    speaker_id: int
    phonemes: list[int]
    durations: list[DurationToken]
    grid: TokenGrid
    speaker: np.ndarray

    def as_item(self) -> tuple:
        return self.phonemes, self.durations, self.grid, self.speaker


def make_chunks(utterances: Sequence[Utterance], chunk_frames: int = 64, seed: int = 0) -> list[Chunk]:
    """Concatenate same-speaker utterances in seeded order and slice fixed-length chunks.

    Each chunk keeps the phoneme window covered by its frames, so its
    duration tokens replay from pointer 1. The trailing remainder of each
    speaker's stream is dropped.
    """
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be positive")
    by_spk: dict[int, list[Utterance]] = {}
    for u in utterances:
        by_spk.setdefault(u.speaker_id, []).append(u)
    rng = np.random.default_rng([seed, 7])
    chunks = []
    for spk in sorted(by_spk):
        group = by_spk[spk]
        order = rng.permutation(len(group))
        phonemes: list[int] = []
        durations: list[DurationToken] = []
        frames = []
        for k in order:
            u = group[k]
            phonemes.extend(u.phonemes)
            durations.extend(u.durations)
            frames.append(u.grid.frames())
        if len(durations) < chunk_frames:
            continue
        frames = np.concatenate(frames)
        cov = decode_tokens(durations, len(phonemes))
        g0 = group[0].grid
        for f0 in range(0, len(durations) - chunk_frames + 1, chunk_frames):
            f1 = f0 + chunk_frames
            lo = cov[f0].b
            hi = max(c.e for c in cov[f0:f1])
            chunks.append(Chunk(
                speaker_id=spk, phonemes=phonemes[lo - 1:hi], durations=durations[f0:f1],
                grid=TokenGrid.from_frames(frames[f0:f1], g0.semantic_vocab, g0.acoustic_vocab),
                speaker=group[0].speaker))
    return chunks


def utterance_chunks(utterances: Sequence[Utterance]) -> list[Chunk]:
    """One chunk per utterance (no concatenation); handy for evaluation."""
    return [Chunk(u.speaker_id, list(u.phonemes), list(u.durations), u.grid, u.speaker) for u in utterances]


# ---------------------------------------------------------------- optimizer

def lr_at(step: int, peak: float, warmup: int, total: int, min_ratio: float = 0.1) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``min_ratio * peak``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    floor = peak * min_ratio
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices only."""

    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params.trainable()}
        self.v = {n: np.zeros_like(params[n].data) for n in params.trainable()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name in self.params.trainable():
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()
        self.t = t


def clip_gradients(params, max_norm: float) -> float:
    names = [n for n in params.trainable() if params[n].grad is not None]
    norm = math.sqrt(sum(float((params[n].grad ** 2).sum()) for n in names))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in names:
            params[n].grad *= scale
    return norm


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: Model
    step: int
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    seconds: float = 0.0


def _dt_select(batch: Batch, k: int, rng: np.random.Generator) -> np.ndarray | None:
    if k <= 0:
        return None
    picks = []
    for b in range(batch.size):
        cols = np.flatnonzero(batch.dt_cols[b])
        if len(cols) > k:
            cols = np.sort(rng.choice(cols, size=k, replace=False))
        picks.append(np.stack([np.full(len(cols), b), cols], axis=1))
    return np.concatenate(picks)


def save_training_checkpoint(path, model: Model, opt: AdamW, config: TrainConfig, step: int) -> None:
    arrays = dict(model.params.arrays())
    arrays.update(opt.state_arrays())
    meta = {"model_config": model.config.to_json(), "train_config": config.to_json(),
            "step": step, "rng": {"seed": config.seed, "step": step},
            "frozen": sorted(model.params.frozen)}
    checkpoint.save(path, arrays, meta)


def load_model(path) -> tuple[Model, dict]:
    """Model weights (and metadata) from a training or export checkpoint."""
    arrays, meta = checkpoint.load(path)
    model = Model(ModelConfig.from_json(meta["model_config"]))
    model.params.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    return model, meta


def train(config: TrainConfig, model: Model, chunks: Sequence[Chunk], out_dir=None,
          resume=None, max_steps: int | None = None, log_every: int = 50) -> TrainResult:
    """Optimize ``model`` in place on ``chunks``.

    ``resume`` names a checkpoint written by this function; training then
    continues from its step with identical batch order and column sampling.
    ``max_steps`` stops early (the schedule still spans the full run).
    """
    if not chunks:
        raise ValidationError("no training chunks")
    if model.config.use_speaker != config.use_speaker:
        raise ValidationError("TrainConfig.use_speaker disagrees with the model config")
    if config.freeze_dt:
        model.params.freeze_prefix("dt.")
    n = len(chunks)
    total = config.total_steps(n)
    warmup = config.warmup(n)
    per_epoch = config.steps_per_epoch(n)
    opt = AdamW(model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    step = 0
    if resume is not None:
        arrays, meta = checkpoint.load(resume)
        model.params.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        step = int(meta["step"])
        opt.load_state(arrays, step)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = step == 0 or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "lr", "loss_tt", "loss_dt"])
    stop = total if max_steps is None else min(total, max_steps)
    metrics = []
    t0 = time.perf_counter()
    order = None
    epoch_of_order = -1
    try:
        while step < stop:
            epoch, pos = divmod(step, per_epoch)
            if epoch != epoch_of_order:
                order = np.random.default_rng([config.seed, 11, epoch]).permutation(n)
                epoch_of_order = epoch
            idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            batch = make_batch(model.config, [chunks[i].as_item() for i in idx])
            sel = _dt_select(batch, config.dt_columns_per_chunk, np.random.default_rng([config.seed, 13, step]))
            lr = lr_at(step, config.peak_lr, warmup, total, config.min_lr_ratio)
            model.params.zero_grad()
            res = forward_train(model, batch, sel)
            loss = res["loss_tt"] + res["loss_dt"]
            ltt, ldt = float(res["loss_tt"].data), float(res["loss_dt"].data)
            if not (math.isfinite(ltt) and math.isfinite(ldt)):
                snap = None
                if out is not None:
                    snap = out / "nonfinite.ckpt"
                    save_training_checkpoint(snap, model, opt, config, step)
                raise NonFiniteLossError(
                    f"non-finite loss at step {step} (loss_TT={ltt}, loss_DT={ldt}, lr={lr}); snapshot: {snap}")
            backward(loss)
            clip_gradients(model.params, config.grad_clip)
            opt.step(lr)
            row = {"step": step, "lr": lr, "loss_tt": ltt, "loss_dt": ldt}
            metrics.append(row)
            if writer is not None:
                writer.writerow([step, repr(lr), repr(ltt), repr(ldt)])
            if log_every and step % log_every == 0:
                log.info("step %d/%d lr %.2e loss_TT %.4f loss_DT %.4f", step, total, lr, ltt, ldt)
            step += 1
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_training_checkpoint(out / "last.ckpt", model, opt, config, step)
    finally:
        if writer is not None:
            fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "last.ckpt"
        save_training_checkpoint(ckpt, model, opt, config, step)
    return TrainResult(model, step, metrics, ckpt, time.perf_counter() - t0)


# ---------------------------------------------------------------- evaluation

def accuracy_counts(tt_logits: np.ndarray, tt_targets: np.ndarray, dt_logits: np.ndarray,
                    dt_targets: np.ndarray, joint_classes: int) -> tuple[int, int, int, int]:
    """Argmax hits and totals for the joint head (PAD excluded) and the depth heads."""
    mask = tt_targets >= 0
    tt_hit = int((tt_logits[..., :joint_classes].argmax(-1) == tt_targets)[mask].sum())
    dt_pred = dt_logits.argmax(-1)
    return tt_hit, int(mask.sum()), int((dt_pred == dt_targets).sum()), int(dt_pred.size)


def teacher_forced_accuracy(model: Model, chunks: Sequence[Chunk], batch_size: int = 16) -> dict:
    cfg = model.config
    tt_hit = tt_n = dt_hit = dt_n = 0
    with no_grad():
        for i in range(0, len(chunks), batch_size):
            batch = make_batch(cfg, [c.as_item() for c in chunks[i:i + batch_size]])
            res = forward_train(model, batch)
            a, b, c, d = accuracy_counts(res["tt_logits"].data, batch.tt_target, res["dt_logits"].data,
                                         res["dt_targets"], cfg.joint_classes)
            tt_hit, tt_n, dt_hit, dt_n = tt_hit + a, tt_n + b, dt_hit + c, dt_n + d
    return {"joint_accuracy": tt_hit / max(tt_n, 1), "dt_accuracy": dt_hit / max(dt_n, 1),
            "joint_frames": tt_n, "dt_tokens": dt_n}


def free_running_per(model: Model, utterances: Sequence[Utterance], smap: SemanticMap,
                     la_cap: int | None = None) -> float:
    """Mean phoneme error rate of temperature-0 streaming generation."""
    inf = model.inference()
    cfg = model.config
    la_cap = cfg.lookahead_cap if la_cap is None else la_cap
    rates = []
    for u in utterances:
        eng = StreamEngine(inf, speaker=u.speaker, temperature=0.0, la_cap=la_cap)
        for w in u.words:
            eng.push_word(w)
        eng.close()
        eng.run()
        frames = eng.token_frames()
        if len(frames) == 0:
            rates.append(1.0)
            continue
        grid = TokenGrid.from_frames(frames, cfg.semantic_vocab, cfg.acoustic_vocab)
        rates.append(phoneme_error_rate(u.phonemes, grid, smap, eng.state.durations))
    return float(np.mean(rates)) if rates else float("nan")


def evaluate(model: Model, chunks: Sequence[Chunk], utterances: Sequence[Utterance] = (),
             smap: SemanticMap | None = None) -> dict:
    """Teacher-forced accuracies on ``chunks`` and free-running PER on ``utterances``."""
    out = teacher_forced_accuracy(model, chunks)
    if utterances:
        smap = smap or SemanticMap(model.config.phoneme_vocab, model.config.semantic_vocab)
        out["per"] = free_running_per(model, utterances, smap)
    return out


def ablation_grid(model_config: ModelConfig, train_config: TrainConfig, train_chunks: Sequence[Chunk],
                  eval_chunks: Sequence[Chunk], eval_utterances: Sequence[Utterance] = (),
                  max_steps: int | None = None, dt_init: dict[str, np.ndarray] | None = None) -> list[dict]:
    """Train and evaluate every (freeze_dt, use_speaker) combination.

    ``dt_init`` optionally supplies depth-transformer weights (names
    ``dt.*``) loaded before training, standing in for a pretrained DT.
    """
    rows = []
    for freeze_dt in (False, True):
        for use_speaker in (True, False):
            mcfg = ModelConfig.from_json({**model_config.to_json(), "use_speaker": use_speaker})
            tcfg = TrainConfig.from_json({**train_config.to_json(), "freeze_dt": freeze_dt,
                                          "use_speaker": use_speaker})
            model = Model(mcfg, seed=tcfg.seed)
            if dt_init:
                model.params.load_arrays({k: v for k, v in dt_init.items()
                                          if k.startswith("dt.") and k in model.params}, strict=False)
            t0 = time.perf_counter()
            train(tcfg, model, train_chunks, max_steps=max_steps, log_every=0)
            metrics = evaluate(model, eval_chunks, eval_utterances)
            rows.append({"freeze_dt": freeze_dt, "use_speaker": use_speaker,
                         "train_seconds": time.perf_counter() - t0, **metrics})
            log.info("ablation %s", json.dumps(rows[-1]))
    return rows


def format_ablation(rows: Sequence[dict]) -> str:
    head = ["freeze_dt", "use_speaker", "joint_accuracy", "dt_accuracy", "per"]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join(
            f"{r[k]:.4f}" if isinstance(r.get(k), float) else str(r.get(k, "")) for k in head))
    return "\n".join(lines)
