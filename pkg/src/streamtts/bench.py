"""Word-feed schedules, the engine driver loop and the latency benchmark."""
from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import CodecSpec
from .engine import MonotonicClock, Prompt, StreamEngine, VirtualClock, delay_ledger_violations
from .errors import StreamTTSError, ValidationError
from .model import InferenceModel

log = logging.getLogger(__name__)

CLOSE_TOKEN = "<close>"


@dataclass
class FeedSchedule:
    """Words with release offsets in milliseconds from stream start."""

    words: list[str]
    offsets_ms: list[float]

    def __post_init__(self):
        if len(self.words) != len(self.offsets_ms):
            raise ValidationError("one release offset per word")
        if any(b < a for a, b in zip(self.offsets_ms, self.offsets_ms[1:])):
            raise ValidationError("release offsets must be non-decreasing")
        if any(o < 0 for o in self.offsets_ms):
            raise ValidationError("release offsets must be non-negative")

    @classmethod
    def all_at_once(cls, words: Sequence[str]) -> "FeedSchedule":
        return cls(list(words), [0.0] * len(words))

    @classmethod
    def fixed_interval(cls, words: Sequence[str], interval_ms: float) -> "FeedSchedule":
        return cls(list(words), [i * interval_ms for i in range(len(words))])

    @classmethod
    def from_file(cls, path) -> "FeedSchedule":
        """Lines of ``word<TAB>offset_ms``; blank lines and ``#`` comments skipped."""
        words, offs = [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{n}: expected word<TAB>offset_ms")
            try:
                offs.append(float(parts[1]))
            except ValueError as exc:
                raise ValidationError(f"{path}:{n}: bad offset {parts[1]!r}") from exc
            words.append(parts[0])
        return cls(words, offs)

    @classmethod
    def build(cls, words: Sequence[str], mode: str = "all", interval_ms: float = 0.0) -> "FeedSchedule":
        if mode == "all":
            return cls.all_at_once(words)
        if mode == "word":
            return cls.fixed_interval(words, interval_ms)
        raise ValidationError(f"unknown feed mode {mode!r}")


def read_word_feed(stream) -> list[str]:
    """Words from a text stream, one per line, ending at ``<close>`` or EOF."""
    words = []
    for line in stream:
        w = line.strip()
        if w == CLOSE_TOKEN:
            break
        if w:
            words.extend(w.split())
    return words


def drive(engine: StreamEngine, schedule: FeedSchedule) -> None:
    """Release words on schedule, stepping the engine whenever it can run."""
    clock = engine.clock
    t0 = clock.now_ns()
    release = [t0 + int(round(o * 1e6)) for o in schedule.offsets_ms]
    i = 0
    while True:
        now = clock.now_ns()
        while i < len(release) and release[i] <= now:
            engine.push_word(schedule.words[i], arrival_ns=release[i])
            i += 1
        if i == len(release) and not engine.state.closed:
            engine.close()
        if engine.try_step() is not None:
            continue
        if i == len(release):
            break
        clock.wait_until(release[i])


@dataclass
class RunResult:
    report: dict | None
    frames: np.ndarray | None
    violations: list[str] = field(default_factory=list)
    error: str | None = None


def run_once(model: InferenceModel, schedule: FeedSchedule, speaker=None, temperature: float = 0.0,
             top_k: int = 0, seed: int = 0, la_cap: int = 10, clock=None,
             prompt: Prompt | None = None) -> tuple[StreamEngine, RunResult]:
    clock = clock or MonotonicClock()
    eng = StreamEngine(model, speaker=speaker, temperature=temperature, top_k=top_k, seed=seed,
                       la_cap=la_cap, clock=clock, codec=CodecSpec())
    try:
        eng.prefill_prompt(prompt)
        drive(eng, schedule)
        report = eng.latency_report()
    except StreamTTSError as exc:
        return eng, RunResult(None, None, error=f"{type(exc).__name__}: {exc}")
    return eng, RunResult(report, eng.token_frames(), delay_ledger_violations(eng))


def _pct(xs: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(xs, dtype=np.float64), q))


def bench(model: InferenceModel, workload: Sequence[FeedSchedule], runs: int = 10,
          virtual_delays_ms: dict | None = None, config_echo: dict | None = None, **kwargs) -> dict:
    """Run every workload item ``runs`` times; report medians and p95 over runs."""
    if runs < 10:
        raise ValidationError("the benchmark needs at least 10 runs")
    results = []
    faults = []
    for r in range(runs):
        for k, sched in enumerate(workload):
            clock = VirtualClock(virtual_delays_ms) if virtual_delays_ms is not None else MonotonicClock()
            _, res = run_once(model, sched, clock=clock, **kwargs)
            if res.error:
                faults.append({"run": r, "item": k, "error": res.error})
                log.warning("run %d item %d faulted: %s", r, k, res.error)
                continue
            results.append(res)
    if not results:
        return {"runs": runs, "completed": 0, "faults": faults, "config": config_echo or {}}
    reps = [x.report for x in results]
    fpl = [x["fpl_ms"] for x in reps]
    rtf = [x["rtf"] for x in reps]
    stage_names = reps[0]["stages_ms"].keys()
    stages = {k: statistics.median(x["stages_ms"][k] for x in reps) for k in stage_names}
    totals = [x["total_ms"] for x in reps]
    stage_gap = max(abs(sum(x["stages_ms"].values()) - x["total_ms"]) / max(x["total_ms"], 1e-12)
                    for x in reps)
    identity = all(not x.violations for x in results)
    return {
        "runs": runs,
        "completed": len(results),
        "fpl_ms": {"median": statistics.median(fpl), "p95": _pct(fpl, 95)},
        "rtf": {"median": statistics.median(rtf), "p95": _pct(rtf, 95)},
        "total_ms": {"median": statistics.median(totals)},
        "stages_ms_median": stages,
        "stage_sum_max_rel_gap": stage_gap,
        "counts_first_frame": reps[0]["first_frame_counts"],
        "call_count_identity": identity,
        "violations": [v for x in results for v in x.violations],
        "faults": faults,
        "config": config_echo or {},
    }
