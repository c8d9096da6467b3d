"""Full-stream generation: incremental text in, decodable frames out.

The engine owns one stream. Words arrive through :meth:`StreamEngine.push_word`;
each push re-runs the phoneme transformer over positions that are not yet
final. :meth:`StreamEngine.try_step` runs one temporal step plus one depth
column whenever the pointer has the phonemes it needs, and returns the frame
made decodable by that step (acoustic rows lag one column behind).

An uncached offline generator with the same sampling order serves as the
reference implementation for tests.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .align import DurationToken, ForcedAlignment, decode_tokens, encode_alignment
from .codec import CodecSpec, WavStreamWriter, decode_frame
from .errors import GenerationFault, StateError, ValidationError
from .grid import FLUSH_SEMANTIC, NUM_ACOUSTIC, NUM_CODEBOOKS, TokenGrid
from .model import InferenceModel, JointToken, _rng, duration_allowed, sample_index, sample_joint
from .phonemizer import Lexicon, default_lexicon, phonemize_word

log = logging.getLogger(__name__)

FRAME_SECONDS = 0.08
MAX_FRAMES_PER_PHONEME = 25
STAGES = ("wait", "pt", "tt", "dt", "decode")


# ---------------------------------------------------------------- clocks

class MonotonicClock:
    """Wall clock in integer nanoseconds."""

    def now_ns(self) -> int:
        return time.perf_counter_ns()

    def charge(self, stage: str) -> None:
        pass

    def wait_until(self, t_ns: int) -> None:
        delay = t_ns - self.now_ns()
        if delay > 0:
            time.sleep(delay / 1e9)


class VirtualClock:
    """Deterministic clock: each stage advances time by a fixed injected delay."""

    def __init__(self, delays_ms: dict[str, float] | None = None, start_ns: int = 0):
        self.delays_ns = {k: int(round(v * 1e6)) for k, v in (delays_ms or {}).items()}
        self.t = start_ns

    def now_ns(self) -> int:
        return self.t

    def charge(self, stage: str) -> None:
        self.t += self.delays_ns.get(stage, 0)

    def wait_until(self, t_ns: int) -> None:
        self.t = max(self.t, t_ns)


class LatencyLedger:
    """Contiguous stage accounting: every nanosecond after ``begin`` lands in one stage."""

    def __init__(self, clock):
        self.clock = clock
        self.start_ns: int | None = None
        self.last_ns: int | None = None
        self.stage_ns: dict[str, int] = defaultdict(int)
        self.counts: Counter = Counter()

    @property
    def started(self) -> bool:
        return self.start_ns is not None

    def begin(self, t_ns: int) -> None:
        if self.start_ns is None:
            self.start_ns = self.last_ns = t_ns

    def mark(self, stage: str) -> int:
        now = self.clock.now_ns()
        if self.last_ns is None:
            self.begin(now)
        self.stage_ns[stage] += now - self.last_ns
        self.last_ns = now
        return now

    @property
    def total_ns(self) -> int:
        return 0 if self.start_ns is None else self.last_ns - self.start_ns


# ---------------------------------------------------------------- data types

@dataclass(frozen=True)
class TextEvent:
    kind: str                 # "word" or "close"
    text: str = ""
    arrival_ns: int | None = None

    def __post_init__(self):
        if self.kind not in ("word", "close"):
            raise ValueError(f"unknown text event kind {self.kind!r}")


@dataclass
class FrameOut:
    index: int                        # 0-based generated frame, -1 for the warm-up marker
    tokens: np.ndarray | None         # (12,) delay-resolved frame tokens
    emit_ns: int
    decodable: bool
    step: int                         # 1-based engine step that produced it
    duration: DurationToken | None = None
    audio: np.ndarray | None = None


@dataclass
class Prompt:
    phonemes: list[int]
    grid: TokenGrid
    alignment: ForcedAlignment
    speaker: np.ndarray

    def __post_init__(self):
        if list(self.alignment.phoneme_ids) != list(self.phonemes):
            raise ValidationError("prompt alignment phonemes differ from prompt phonemes")
        if self.grid.num_frames != self.alignment.num_frames:
            raise ValidationError(
                f"prompt grid holds {self.grid.num_frames} frames, alignment {self.alignment.num_frames}")

    @classmethod
    def from_utterance(cls, utt) -> "Prompt":
        """Prompt built from a corpus utterance; the flush column is dropped."""
        g = utt.grid
        grid = TokenGrid(g.tokens[:, :g.num_frames], g.semantic_vocab, g.acoustic_vocab, flushed=False)
        return cls(list(utt.phonemes), grid, utt.alignment, utt.speaker)

    @property
    def num_frames(self) -> int:
        return self.grid.num_frames


def default_speaker(dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = 1.0
    return v


def lookahead_limits(num_phonemes: int, la_cap: int, prompt_len: int = 0) -> list[int]:
    """Per-position look-ahead; prompt positions only see the prompt."""
    out = [min(la_cap, prompt_len - 1 - i) for i in range(min(prompt_len, num_phonemes))]
    out += [min(la_cap, num_phonemes - 1 - i) for i in range(prompt_len, num_phonemes)]
    return out


@dataclass
class StreamState:
    phonemes: list[int] = field(default_factory=list)
    word_extents: list[tuple[int, int]] = field(default_factory=list)
    watermark: int = 0                # positions below are final in the PT cache
    pointer: int = 1                  # 1-based first phoneme of the next frame
    step: int = 0                     # columns run so far (prompt included)
    prompt_frames: int = 0
    prompt_phonemes: int = 0
    prev_semantic: int | None = None
    same_pointer_frames: int = 0
    closed: bool = False
    flushed: bool = False
    consumed_max: int = 0             # highest 1-based phoneme fed to TT
    frames: list[FrameOut] = field(default_factory=list)
    durations: list[DurationToken] = field(default_factory=list)
    semantics: list[int] = field(default_factory=list)
    first_word_ns: int | None = None
    first_frame_counts: dict | None = None


# ---------------------------------------------------------------- engine

class StreamEngine:
    def __init__(self, model: InferenceModel, speaker=None, temperature: float = 0.0, top_k: int = 0,
                 seed=0, la_cap: int = 10, clock=None, lexicon: Lexicon | None = None,
                 codec: CodecSpec | None = None, sink: "queue.Queue | Callable | None" = None,
                 max_frames_per_phoneme: int = MAX_FRAMES_PER_PHONEME):
        cfg = model.config
        if not 0 <= la_cap <= cfg.lookahead_cap:
            raise ValueError(f"la_cap must be within 0..{cfg.lookahead_cap}")
        self.model = model
        self.cfg = cfg
        self.speaker = np.asarray(default_speaker(cfg.speaker_dim) if speaker is None else speaker, np.float64)
        self.temperature = temperature
        self.top_k = top_k
        self.rng = _rng(seed)
        self.la_cap = la_cap
        self.clock = clock or MonotonicClock()
        self.lexicon = lexicon or default_lexicon()
        self.codec = codec
        self.sink = sink
        self.max_frames_per_phoneme = max_frames_per_phoneme
        self.ledger = LatencyLedger(self.clock)
        self.state = StreamState()
        self._pt_cache = model.new_pt_cache()
        self._tt_cache = model.new_tt_cache()
        self._emb = np.zeros((0, cfg.pt_dim), np.float32)
        self._frozen: dict[int, np.ndarray] = {}
        self._pending_semantic: int | None = None
        self._pending_duration: DurationToken | None = None

    # -- text side
    def la_limits(self) -> list[int]:
        s = self.state
        return lookahead_limits(len(s.phonemes), self.la_cap, s.prompt_phonemes)

    def _refresh_pt(self) -> None:
        s = self.state
        m = len(s.phonemes)
        s.watermark = min(m, max(s.prompt_phonemes, m - self.la_cap, s.watermark))
        self._emb = self.model.pt_encode(s.phonemes, self.la_limits(), self._pt_cache, s.watermark)
        self.clock.charge("pt")
        self.ledger.mark("pt")
        self.ledger.counts["pt_passes"] += 1

    def push_word(self, word: str, arrival_ns: int | None = None) -> list[int]:
        """Phonemize and append a word; returns its phoneme ids."""
        s = self.state
        if s.closed:
            raise StateError("cannot push words after close")
        arrival = self.clock.now_ns() if arrival_ns is None else int(arrival_ns)
        if s.first_word_ns is None:
            s.first_word_ns = arrival
            self.ledger.begin(arrival)
        self.ledger.mark("wait")
        ids = phonemize_word(word, self.lexicon)
        if not ids:
            log.warning("word %r has no pronounceable characters; skipped", word)
            return ids
        start = len(s.phonemes)
        s.phonemes.extend(ids)
        s.word_extents.append((start, len(s.phonemes)))
        self._refresh_pt()
        return ids

    def push_phonemes(self, ids: Sequence[int], arrival_ns: int | None = None) -> None:
        """Append already-phonemized ids as one word."""
        s = self.state
        if s.closed:
            raise StateError("cannot push words after close")
        arrival = self.clock.now_ns() if arrival_ns is None else int(arrival_ns)
        if s.first_word_ns is None:
            s.first_word_ns = arrival
            self.ledger.begin(arrival)
        self.ledger.mark("wait")
        if not ids:
            return
        start = len(s.phonemes)
        s.phonemes.extend(int(i) for i in ids)
        s.word_extents.append((start, len(s.phonemes)))
        self._refresh_pt()

    def close(self) -> None:
        if self.state.closed:
            raise StateError("stream already closed")
        self.state.closed = True

    @property
    def done(self) -> bool:
        s = self.state
        return s.flushed or (s.closed and not s.phonemes)

    # -- prompt
    def prefill_prompt(self, prompt: Prompt | None) -> None:
        s = self.state
        if s.step or s.phonemes:
            raise StateError("prompt must be prefilled on a fresh stream")
        if prompt is None or not prompt.phonemes:
            return
        durations = encode_alignment(prompt.alignment)
        if len(durations) != prompt.num_frames:
            raise ValidationError(
                f"prompt alignment gives {len(durations)} frames but grid has {prompt.num_frames}")
        cov = decode_tokens(durations, len(prompt.phonemes))
        self.speaker = np.asarray(prompt.speaker, np.float64)
        s.prompt_phonemes = len(prompt.phonemes)
        s.phonemes = list(prompt.phonemes)
        s.word_extents.append((0, s.prompt_phonemes))
        s.watermark = s.prompt_phonemes
        self._emb = self.model.pt_encode(s.phonemes, self.la_limits(), self._pt_cache, s.watermark)
        sem = prompt.grid.tokens[0]
        for c, cv in enumerate(cov):
            prev = self.cfg.bos if c == 0 else int(sem[c - 1])
            slot_a = self._consume(cv.b)
            slot_b = self._consume(cv.b + 1) if cv.b < s.prompt_phonemes else None
            self.model.tt_step(self._tt_cache, prev, slot_a, slot_b, self.speaker, position=c)
        s.step = s.prompt_frames = prompt.num_frames
        s.prev_semantic = int(sem[prompt.num_frames - 1])
        s.pointer = s.prompt_phonemes + 1

    # -- generation
    def _consume(self, idx: int) -> np.ndarray:
        """Embedding of 1-based phoneme ``idx``, frozen on first use."""
        row = self._frozen.get(idx)
        if row is None:
            row = self._frozen[idx] = self._emb[idx - 1].copy()
            self.state.consumed_max = max(self.state.consumed_max, idx)
        return row

    def ready(self) -> bool:
        s = self.state
        if s.flushed:
            return False
        m = len(s.phonemes)
        if s.pointer > m:
            return s.closed and m > s.prompt_phonemes
        return s.pointer + 1 <= m or s.closed

    def try_step(self) -> FrameOut | None:
        if not self.ready():
            return None
        s = self.state
        self.ledger.mark("wait")
        m = len(s.phonemes)
        flush = s.pointer > m
        prev = self.cfg.bos if s.prev_semantic is None else s.prev_semantic
        if flush:
            slot_a, slot_b = self.model.zero_slot, None
        else:
            slot_a = self._consume(s.pointer)
            slot_b = self._consume(s.pointer + 1) if s.pointer < m else None
        h, logits = self.model.tt_step(self._tt_cache, prev, slot_a, slot_b, self.speaker, position=s.step)
        if flush:
            semantic, dur = FLUSH_SEMANTIC, None
        else:
            force_go = s.same_pointer_frames + 1 >= self.max_frames_per_phoneme
            allowed = duration_allowed(self.cfg.semantic_vocab, allow_count2=slot_b is not None,
                                       allow_stay=not force_go)
            jt = sample_joint(logits, self.temperature, self.top_k, self.rng, allowed, self.cfg.semantic_vocab)
            semantic, dur = jt.semantic, jt.duration
        self.clock.charge("tt")
        self.ledger.mark("tt")
        self.ledger.counts["tt_steps"] += 1

        column = s.step
        if column == 0:
            acoustic = None
        else:
            acoustic = self.model.dt_generate(h, semantic, self.speaker, self.temperature, self.rng, self.top_k)
        self.clock.charge("dt")
        self.ledger.mark("dt")
        self.ledger.counts["dt_columns"] += 1

        # pointer update
        if dur is not None:
            e = s.pointer + dur.count - 1
            if e > m:
                raise GenerationFault(
                    f"step {column + 1}: token {dur} at pointer {s.pointer} overruns {m} phonemes")
            new_b = e + 1 if dur.go else e
            s.same_pointer_frames = s.same_pointer_frames + 1 if new_b == s.pointer else 0
            s.pointer = new_b
            s.durations.append(dur)
            s.semantics.append(semantic)
        else:
            s.flushed = True
        s.step += 1

        gen_index = column - 1 - s.prompt_frames
        if gen_index < 0:
            out = FrameOut(-1, None, self.ledger.last_ns, False, s.step - s.prompt_frames, dur)
        else:
            tokens = np.array([self._pending_semantic] + list(acoustic), dtype=np.int64)
            out = FrameOut(gen_index, tokens, 0, True, s.step - s.prompt_frames, self._pending_duration)
            if self.codec is not None:
                out.audio = decode_frame(tokens, self.codec)
                self.clock.charge("decode")
                self.ledger.mark("decode")
                self.ledger.counts["decodes"] += 1
            out.emit_ns = self.ledger.last_ns
            if s.first_frame_counts is None:
                s.first_frame_counts = dict(self.ledger.counts)
        self._pending_semantic, self._pending_duration = semantic, dur
        s.prev_semantic = semantic
        s.frames.append(out)
        if out.decodable and self.sink is not None:
            if callable(self.sink):
                self.sink(out)
            else:
                self.sink.put(out)
        return out

    def run(self) -> list[FrameOut]:
        """Step until gated; returns the frames produced."""
        outs = []
        while (f := self.try_step()) is not None:
            outs.append(f)
        return outs

    # -- results
    def decodable_frames(self) -> list[FrameOut]:
        return [f for f in self.state.frames if f.decodable]

    def token_frames(self) -> np.ndarray:
        fr = self.decodable_frames()
        return np.stack([f.tokens for f in fr]) if fr else np.zeros((0, NUM_CODEBOOKS), np.int64)

    def latency_report(self) -> dict:
        s = self.state
        frames = self.decodable_frames()
        if not frames:
            raise StateError("no decodable frames emitted yet")
        fpl_ns = frames[0].emit_ns - s.first_word_ns
        total = self.ledger.total_ns
        stages = {k: self.ledger.stage_ns.get(k, 0) for k in STAGES}
        gen_ns = total - stages["wait"]
        audio_s = FRAME_SECONDS * len(frames)
        return {
            "fpl_ms": fpl_ns / 1e6,
            "rtf": gen_ns / 1e9 / audio_s,
            "total_ms": total / 1e6,
            "generation_ms": gen_ns / 1e6,
            "stages_ms": {k: v / 1e6 for k, v in stages.items()},
            "counts": {k: int(self.ledger.counts.get(k, 0))
                       for k in ("pt_passes", "tt_steps", "dt_columns", "decodes")},
            "first_frame_counts": dict(s.first_frame_counts or {}),
            "frames": len(frames),
        }


def delay_ledger_violations(engine: StreamEngine) -> list[str]:
    """Check the acoustic-delay bookkeeping recorded by an engine run."""
    problems = []
    ff = engine.state.first_frame_counts or {}
    if ff.get("tt_steps") != 2 or ff.get("dt_columns") != 2:
        problems.append(f"first decodable frame after {ff.get('tt_steps')} TT steps, "
                        f"{ff.get('dt_columns')} DT columns")
    if engine.codec is not None and ff.get("decodes") != 1:
        problems.append(f"first decodable frame after {ff.get('decodes')} decodes")
    for f in engine.state.frames:
        if f.decodable and f.step != f.index + 2:
            problems.append(f"frame {f.index} decodable at step {f.step}")
        if not f.decodable and f.step != 1:
            problems.append(f"non-decodable marker at step {f.step}")
    return problems


# ---------------------------------------------------------------- offline reference

def offline_generate(model: InferenceModel, phonemes: Sequence[int], speaker=None, temperature: float = 0.0,
                     top_k: int = 0, seed=0, la_cap: int = 10, prompt: Prompt | None = None,
                     max_frames_per_phoneme: int = MAX_FRAMES_PER_PHONEME) -> tuple[np.ndarray, list[DurationToken]]:
    """Generate with all text known up front, recomputing TT from scratch each step.

    Returns the (T, 12) frame tokens and the sampled duration tokens.
    """
    cfg = model.config
    rng = _rng(seed)
    spk = np.asarray(default_speaker(cfg.speaker_dim) if speaker is None else speaker, np.float64)
    p_len = 0
    ph = list(phonemes)
    rows: list[np.ndarray] = []
    if prompt is not None and prompt.phonemes:
        spk = np.asarray(prompt.speaker, np.float64)
        p_len = len(prompt.phonemes)
        ph = list(prompt.phonemes) + ph
    m = len(ph)
    if m == p_len:
        return np.zeros((0, NUM_CODEBOOKS), np.int64), []
    emb = model.pt_encode(ph, lookahead_limits(m, la_cap, p_len))
    zero = model.zero_slot

    prev = cfg.bos
    if p_len:
        pd = encode_alignment(prompt.alignment)
        sem = prompt.grid.tokens[0]
        for c, cv in enumerate(decode_tokens(pd, p_len)):
            rows.append(model.tt_input(prev, emb[cv.b - 1], emb[cv.b] if cv.b < p_len else None, spk))
            prev = int(sem[c])
    b = p_len + 1
    same = 0
    frames, durations = [], []
    pending = None                     # semantic token of the previous column
    while True:
        flush = b > m
        if flush:
            rows.append(model.tt_input(prev, zero, None, spk))
        else:
            rows.append(model.tt_input(prev, emb[b - 1], emb[b] if b < m else None, spk))
        hs, logits = model.tt_full(rows)
        if flush:
            semantic, dur = FLUSH_SEMANTIC, None
        else:
            allowed = duration_allowed(cfg.semantic_vocab, allow_count2=b < m,
                                       allow_stay=same + 1 < max_frames_per_phoneme)
            jt = sample_joint(logits[-1], temperature, top_k, rng, allowed, cfg.semantic_vocab)
            semantic, dur = jt.semantic, jt.duration
        if len(rows) > 1:
            acoustic = model.dt_generate(hs[-1], semantic, spk, temperature, rng, top_k)
            if pending is not None:
                frames.append([pending] + list(acoustic))
        pending = semantic
        if dur is None:
            break
        e = b + dur.count - 1
        new_b = e + 1 if dur.go else e
        same = same + 1 if new_b == b else 0
        b = new_b
        durations.append(dur)
        prev = semantic
    return np.asarray(frames, dtype=np.int64).reshape(-1, NUM_CODEBOOKS), durations


# ---------------------------------------------------------------- token log and decode consumer

def write_token_log(path, frames: Sequence[FrameOut]) -> None:
    """TSV: index, 12 tokens, packed duration (-1 for none), emit time in ns."""
    lines = ["index\t" + "\t".join(f"cb{q}" for q in range(NUM_CODEBOOKS)) + "\tduration\temit_ns"]
    for f in frames:
        if not f.decodable:
            continue
        dur = -1 if f.duration is None else f.duration.packed_id
        lines.append("\t".join(str(x) for x in [f.index, *f.tokens.tolist(), dur, f.emit_ns]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_token_log(path) -> tuple[np.ndarray, list[int], list[int]]:
    """Returns (frames (T, 12), packed durations, emit times)."""
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    frames, durs, times = [], [], []
    for n, line in enumerate(rows, start=2):
        parts = line.split("\t")
        if len(parts) != NUM_CODEBOOKS + 3:
            raise ValidationError(f"{path}:{n}: expected {NUM_CODEBOOKS + 3} fields")
        frames.append([int(x) for x in parts[1:NUM_CODEBOOKS + 1]])
        durs.append(int(parts[-2]))
        times.append(int(parts[-1]))
    return np.asarray(frames, dtype=np.int64).reshape(-1, NUM_CODEBOOKS), durs, times


class DecodeConsumer(threading.Thread):
    """Drains FrameOut values from a bounded queue and writes audio.

    Put ``None`` on the queue to stop. Frames that already carry audio are
    written as-is; others are decoded here.
    """

    def __init__(self, fifo: queue.Queue, writer: WavStreamWriter | None = None,
                 spec: CodecSpec = CodecSpec()):
        super().__init__(daemon=True)
        self.fifo = fifo
        self.writer = writer
        self.spec = spec
        self.chunks: list[np.ndarray] = []
        self.error: Exception | None = None

    def run(self) -> None:
        while True:
            item = self.fifo.get()
            if item is None:
                break
            try:
                audio = item.audio if item.audio is not None else decode_frame(item.tokens, self.spec)
                self.chunks.append(audio)
                if self.writer is not None:
                    self.writer.write(audio)
            except Exception as exc:  # surfaced by the caller after join
                self.error = exc
                break

    def audio(self) -> np.ndarray:
        return np.concatenate(self.chunks) if self.chunks else np.zeros(0)
