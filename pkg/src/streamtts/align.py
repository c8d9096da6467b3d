"""Duration-token alignment codec.

Each audio frame carries a duration token ``(shift, count)``: ``count`` in
{1, 2} is how many phonemes the frame covers starting at the pointer ``b``,
and ``shift`` says whether the next frame starts at the phoneme after the
last covered one (go) or stays on it (stay). Phoneme indices are 1-based.
"""
from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import AlignmentError, OverrunError

FRAME_RATE = 12.5


class Shift(enum.IntEnum):
    STAY = 0
    GO = 1


@dataclass(frozen=True)
class DurationToken:
    shift: Shift
    count: int

    def __post_init__(self):
        if self.count not in (1, 2):
            raise ValueError(f"duration count must be 1 or 2, got {self.count}")
        object.__setattr__(self, "shift", Shift(self.shift))

    @property
    def packed_id(self) -> int:
        return 2 * int(self.shift) + (self.count - 1)

    @classmethod
    def from_packed(cls, packed: int) -> "DurationToken":
        if not 0 <= packed <= 3:
            raise ValueError(f"packed duration id must be in 0..3, got {packed}")
        return cls(Shift(packed // 2), packed % 2 + 1)

    @property
    def go(self) -> bool:
        return self.shift is Shift.GO

    def __repr__(self) -> str:
        return f"({'go' if self.go else 'stay'},{self.count})"


STAY1 = DurationToken(Shift.STAY, 1)
STAY2 = DurationToken(Shift.STAY, 2)
GO1 = DurationToken(Shift.GO, 1)
GO2 = DurationToken(Shift.GO, 2)


@dataclass(frozen=True)
class FrameCoverage:
    b: int
    e: int


@dataclass
class ForcedAlignment:
    """Phoneme ids with end times in frame units (12.5 frames per second)."""

    phoneme_ids: list[int]
    end_times: list[float]

    def __post_init__(self):
        if len(self.phoneme_ids) < 1:
            raise AlignmentError("alignment needs at least one phoneme")
        if len(self.phoneme_ids) != len(self.end_times):
            raise AlignmentError("phoneme_ids and end_times differ in length")
        prev = 0.0
        for i, t in enumerate(self.end_times):
            if not t > prev:
                raise AlignmentError(f"end_times must be positive and strictly increasing (index {i})")
            prev = t

    @property
    def num_phonemes(self) -> int:
        return len(self.phoneme_ids)

    @property
    def num_frames(self) -> int:
        return math.ceil(self.end_times[-1])

    def to_json(self) -> dict:
        return {"phonemes": list(self.phoneme_ids), "end_frames": list(self.end_times)}

    @classmethod
    def from_json(cls, obj: dict) -> "ForcedAlignment":
        return cls([int(p) for p in obj["phonemes"]], [float(t) for t in obj["end_frames"]])


def load_alignment(path) -> ForcedAlignment:
    return ForcedAlignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def alignment_from_intervals(obj: dict, phoneme_index: dict[str, int],
                             frame_rate: float = FRAME_RATE) -> ForcedAlignment:
    """Convert ``{"intervals": [{"phoneme", "start_s", "end_s"}, ...]}`` to frame units."""
    ids, ends = [], []
    for iv in sorted(obj["intervals"], key=lambda x: x["start_s"]):
        ph = iv["phoneme"]
        if ph not in phoneme_index:
            raise AlignmentError(f"unknown phoneme {ph!r} in interval list")
        ids.append(phoneme_index[ph])
        ends.append(float(iv["end_s"]) * frame_rate)
    return ForcedAlignment(ids, ends)


def decode_tokens(tokens: Sequence[DurationToken], num_phonemes: int) -> list[FrameCoverage]:
    """Replay duration tokens into per-frame phoneme spans."""
    if num_phonemes < 1:
        raise AlignmentError("need at least one phoneme")
    if not tokens:
        raise AlignmentError("need at least one duration token")
    out = []
    b = 1
    for t, tok in enumerate(tokens, start=1):
        if b > num_phonemes:
            raise OverrunError(f"frame {t} starts at phoneme {b} but only {num_phonemes} exist")
        e = b + tok.count - 1
        if e > num_phonemes:
            raise OverrunError(f"frame {t} covers phoneme {e} but only {num_phonemes} exist")
        out.append(FrameCoverage(b, e))
        b = e + 1 if tok.go else e
    return out


def is_terminal(tokens: Sequence[DurationToken], num_phonemes: int) -> bool:
    """True when the last token is a go that lands on the final phoneme."""
    cov = decode_tokens(tokens, num_phonemes)
    return tokens[-1].go and cov[-1].e == num_phonemes


def _starts(ends: Sequence[float]) -> list[float]:
    return [0.0] + list(ends[:-1])


def ideal_coverage(a: ForcedAlignment) -> list[FrameCoverage]:
    """Phonemes active in each frame (t-1, t], without the two-phoneme cap."""
    starts = _starts(a.end_times)
    out = []
    for t in range(1, a.num_frames + 1):
        lo = next(k for k, e in enumerate(a.end_times, start=1) if e > t - 1)
        hi = max(k for k, s in enumerate(starts, start=1) if s < t)
        out.append(FrameCoverage(lo, hi))
    return out


def encode_alignment(a: ForcedAlignment) -> list[DurationToken]:
    """Greedy left-to-right duration tokens for a forced alignment.

    When a frame would need three or more phonemes, the extra ones spill into
    following frames with go tokens until the pointer catches up.
    """
    ends = a.end_times
    starts = _starts(ends)
    m = a.num_phonemes
    n_frames = a.num_frames
    if n_frames == 0:
        raise AlignmentError("empty utterance")
    tokens: list[DurationToken] = []
    b, t, hi = 1, 1, 0
    while True:
        if t > n_frames:
            hi = m
        else:
            while hi < m and starts[hi] < t:
                hi += 1
        count = min(2, hi - b + 1)
        e = b + count - 1
        go = ends[e - 1] <= t or e < hi
        tokens.append(DurationToken(Shift.GO if go else Shift.STAY, count))
        if go:
            if e == m:
                return tokens
            b = e + 1
        else:
            b = e
        t += 1


def coverage_stats(tokens: Sequence[DurationToken], num_phonemes: int | None = None) -> dict:
    """Histogram of frames per phoneme plus two-phoneme and stay rates."""
    if num_phonemes is None:
        b, num_phonemes = 1, 0
        for tok in tokens:
            e = b + tok.count - 1
            num_phonemes = max(num_phonemes, e)
            b = e + 1 if tok.go else e
    cov = decode_tokens(tokens, num_phonemes)
    per_phoneme = Counter()
    for c in cov:
        for k in range(c.b, c.e + 1):
            per_phoneme[k] += 1
    hist = Counter(per_phoneme.values())
    n = len(tokens)
    return {
        "frames_per_phoneme": dict(sorted(hist.items())),
        "two_phoneme_frame_rate": sum(1 for c in cov if c.e > c.b) / n,
        "stay_rate": sum(1 for tok in tokens if not tok.go) / n,
    }
