"""Synthetic speech-token corpus and the phoneme-error-rate proxy.

Utterances are built from lexicon words. Phoneme durations come from a
seeded per-(phoneme, speaker) table in half-frame steps, so every frame holds
one or two phonemes. Semantic and acoustic tokens are fixed functions of the
frame coverage, which makes the whole grid a deterministic function of the
phonemes, the durations and the speaker.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import DurationToken, ForcedAlignment, decode_tokens, encode_alignment
from .grid import NUM_ACOUSTIC, NUM_CODEBOOKS, TokenGrid
from .phonemizer import INVENTORY, Lexicon, default_lexicon

VOWELS = {"AA", "AE", "AH", "AO", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "UW"}


@dataclass
class CorpusSpec:
    num_speakers: int = 200
    num_utterances: int = 2000
    min_phonemes: int = 8
    max_phonemes: int = 30
    # probability that a phoneme's duration moves by half a frame
    jitter_prob: float = 0.05
    # probability that a speaker's duration for a given phoneme is half a frame longer
    speaker_slow_prob: float = 0.0
    min_duration: float = 1.0
    seed: int = 0
    semantic_vocab: int = 64
    acoustic_vocab: int = 64
    speaker_dim: int = 16
    duration_table: list[list[float]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.min_duration < 0.4:
            raise ValueError("phoneme durations must be at least 0.4 frames")
        if self.min_phonemes < 1 or self.max_phonemes < self.min_phonemes:
            raise ValueError("bad utterance length range")
        if self.num_speakers < 1:
            raise ValueError("need at least one speaker")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("duration_table")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusSpec":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class SemanticMap:
    """Semantic id of a frame from the phonemes it covers.

    A single phoneme p maps to p; a pair (p1, p2) maps to P + p2 where P is
    the inventory size. The first phoneme of a pair always shows up in an
    earlier frame in this corpus, so the pair token only needs the second.
    """

    def __init__(self, num_phonemes: int, semantic_vocab: int):
        if semantic_vocab < 2 * num_phonemes:
            raise ValueError(f"semantic vocab {semantic_vocab} < 2 x {num_phonemes} phonemes")
        self.num_phonemes = num_phonemes
        self.semantic_vocab = semantic_vocab

    def encode(self, covered: Sequence[int]) -> int:
        if len(covered) == 1:
            return int(covered[0])
        if len(covered) == 2:
            return self.num_phonemes + int(covered[1])
        raise ValueError("a frame covers one or two phonemes")

    def invert(self, token: int) -> tuple[int, int] | None:
        """(count, phoneme) where phoneme is the sole or second covered one."""
        if token < self.num_phonemes:
            return 1, int(token)
        if token < 2 * self.num_phonemes:
            return 2, int(token) - self.num_phonemes
        return None


@dataclass
class Utterance:
    utt_seed: int
    speaker_id: int
    words: list[str]
    phonemes: list[int]
    alignment: ForcedAlignment
    durations: list[DurationToken]
    grid: TokenGrid
    speaker: np.ndarray

    @property
    def num_frames(self) -> int:
        return len(self.durations)


class Corpus:
    """Seeded generator over a :class:`CorpusSpec` and a lexicon."""

    def __init__(self, spec: CorpusSpec, lexicon: Lexicon | None = None):
        self.spec = spec
        self.lexicon = lexicon or default_lexicon()
        self.inventory = self.lexicon.inventory
        self.semantic_map = SemanticMap(len(self.inventory), spec.semantic_vocab)
        rng = np.random.default_rng([spec.seed, 1])
        p = len(self.inventory)
        if spec.duration_table is not None:
            self.base = np.asarray(spec.duration_table, dtype=np.float64)
        else:
            phone_base = np.array([
                rng.choice([1.5, 2.0, 2.5]) if s in VOWELS else rng.choice([1.0, 1.5])
                for s in self.inventory])
            slow = rng.random((spec.num_speakers, p)) < spec.speaker_slow_prob
            self.base = phone_base[None, :] + 0.5 * slow
        if self.base.shape != (spec.num_speakers, p):
            raise ValueError("duration table must be speakers x phonemes")
        self.acoustic_phone = rng.integers(0, spec.acoustic_vocab, size=(NUM_ACOUSTIC, p))
        self.acoustic_speaker = rng.integers(0, spec.acoustic_vocab, size=(NUM_ACOUSTIC, spec.num_speakers))
        self._words = self.lexicon.words()

    def speaker_vector(self, speaker_id: int) -> np.ndarray:
        v = np.random.default_rng([self.spec.seed, 2, speaker_id]).standard_normal(self.spec.speaker_dim)
        return v / np.linalg.norm(v)

    def acoustic_tokens(self, phoneme: int, speaker_id: int, parity: int) -> np.ndarray:
        q = np.arange(NUM_ACOUSTIC)
        return (self.acoustic_phone[:, phoneme] + self.acoustic_speaker[:, speaker_id]
                + parity * (7 + 2 * q)) % self.spec.acoustic_vocab

    def sample_words(self, rng: np.random.Generator) -> tuple[list[str], list[int]]:
        target = int(rng.integers(self.spec.min_phonemes, self.spec.max_phonemes + 1))
        words, phones = [], []
        while len(phones) < target:
            w = self._words[int(rng.integers(len(self._words)))]
            pron = self.lexicon.entries[w]
            if phones and len(phones) + len(pron) > self.spec.max_phonemes:
                continue
            words.append(w)
            phones.extend(pron)
        return words, phones

    def durations_for(self, phonemes: Sequence[int], speaker_id: int, rng: np.random.Generator) -> np.ndarray:
        d = self.base[speaker_id, list(phonemes)].copy()
        jit = rng.random(len(d)) < self.spec.jitter_prob
        sign = np.where(rng.random(len(d)) < 0.5, -0.5, 0.5)
        d = d + jit * sign
        return np.maximum(d, self.spec.min_duration)

    def grid_for(self, phonemes: Sequence[int], durations: Sequence[DurationToken],
                 speaker_id: int) -> TokenGrid:
        cov = decode_tokens(durations, len(phonemes))
        frames = np.empty((len(cov), NUM_CODEBOOKS), dtype=np.int64)
        run = 0
        for t, c in enumerate(cov):
            run = run + 1 if t and cov[t - 1].b == c.b else 0
            covered = phonemes[c.b - 1:c.e]
            frames[t, 0] = self.semantic_map.encode(covered)
            frames[t, 1:] = self.acoustic_tokens(covered[0], speaker_id, run % 2)
        return TokenGrid.from_frames(frames, self.spec.semantic_vocab, self.spec.acoustic_vocab)

    def utterance(self, utt_seed: int) -> Utterance:
        rng = np.random.default_rng([self.spec.seed, 3, utt_seed])
        speaker_id = int(rng.integers(self.spec.num_speakers))
        words, phones = self.sample_words(rng)
        ends = np.cumsum(self.durations_for(phones, speaker_id, rng))
        alignment = ForcedAlignment(list(phones), [float(x) for x in ends])
        durations = encode_alignment(alignment)
        return Utterance(
            utt_seed=utt_seed, speaker_id=speaker_id, words=words, phonemes=list(phones),
            alignment=alignment, durations=durations,
            grid=self.grid_for(phones, durations, speaker_id),
            speaker=self.speaker_vector(speaker_id),
        )

    def manifest_records(self, seeds: Sequence[int] | None = None) -> list[dict]:
        seeds = range(self.spec.num_utterances) if seeds is None else seeds
        out = []
        for s in seeds:
            u = self.utterance(s)
            out.append({"utt_seed": s, "speaker_id": u.speaker_id, "words": u.words,
                        "num_phonemes": len(u.phonemes), "num_frames": u.num_frames})
        return out


def generate_utterance(spec: CorpusSpec, utt_seed: int, lexicon: Lexicon | None = None) -> Utterance:
    return Corpus(spec, lexicon).utterance(utt_seed)


def write_manifest(path, spec: CorpusSpec, records: list[dict]) -> None:
    """JSON lines: a header with the spec, then one utterance per line."""
    lines = [json.dumps({"corpus_spec": spec.to_json()}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[CorpusSpec, list[dict]]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not rows or "corpus_spec" not in rows[0]:
        raise ValueError(f"{path}: missing corpus_spec header line")
    return CorpusSpec.from_json(rows[0]["corpus_spec"]), rows[1:]


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def recover_phonemes(semantic: Sequence[int], smap: SemanticMap,
                     durations: Sequence[DurationToken] | None = None) -> list[int]:
    """Phoneme string read back from semantic tokens.

    With duration tokens, each frame's coverage places the decoded phonemes
    at their indices (unknown slots become -1). Without them, consecutive
    repeats are collapsed.
    """
    if durations is None:
        out: list[int] = []
        for tok in semantic:
            inv = smap.invert(int(tok))
            if inv is not None and (not out or out[-1] != inv[1]):
                out.append(inv[1])
        return out
    n = len(semantic)
    b, m = 1, 0
    for tok in durations[:n]:
        e = b + tok.count - 1
        m = max(m, e)
        b = e + 1 if tok.go else e
    if m == 0:
        return []
    slots = [-1] * m
    for tok, c in zip(semantic, decode_tokens(list(durations[:n]), m)):
        inv = smap.invert(int(tok))
        if inv is None:
            continue
        count, ph = inv
        if count == c.e - c.b + 1:
            slots[c.e - 1] = ph
    return slots


def phoneme_error_rate(reference: Sequence[int], hypothesis: TokenGrid, smap: SemanticMap,
                       durations: Sequence[DurationToken] | None = None) -> float:
    """Levenshtein distance between reference and recovered phonemes over reference length."""
    if not reference:
        raise ValueError("reference must be non-empty")
    hyp = recover_phonemes(hypothesis.semantic if hypothesis is not None else [], smap, durations)
    return min(1.0, levenshtein(list(reference), hyp) / len(reference))
