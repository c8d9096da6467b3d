"""Token grid geometry shared by the corpus, model, engine and codec."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NUM_CODEBOOKS = 12
NUM_ACOUSTIC = NUM_CODEBOOKS - 1
DURATION_VOCAB = 4
LOOKAHEAD_CAP = 10
# Semantic id written into the trailing flush column (a silent frame).
FLUSH_SEMANTIC = 0


@dataclass
class TokenGrid:
    """Q rows by W columns of token ids with a one-step acoustic delay.

    Row 0 is the semantic stream; column j of rows 1.. holds the acoustic
    tokens of frame j-1, and column 0 of those rows holds the acoustic pad
    (``acoustic_vocab``). When ``flushed`` is set, the final column is a flush
    column whose only purpose is to carry the last frame's acoustic tokens.
    """

    tokens: np.ndarray
    semantic_vocab: int
    acoustic_vocab: int
    flushed: bool = True

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.validate()

    @property
    def acoustic_pad(self) -> int:
        return self.acoustic_vocab

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_frames(self) -> int:
        return self.width - 1 if self.flushed else self.width

    @property
    def semantic(self) -> np.ndarray:
        return self.tokens[0, : self.num_frames]

    def validate(self) -> None:
        t = self.tokens
        if t.ndim != 2 or t.shape[0] != NUM_CODEBOOKS or t.shape[1] < 1:
            raise ValidationError(f"grid must be {NUM_CODEBOOKS} x W, got {t.shape}")
        if self.flushed and t.shape[1] < 2:
            raise ValidationError("a flushed grid needs at least two columns")
        if np.any(t[0] < 0) or np.any(t[0] >= self.semantic_vocab):
            raise ValidationError("semantic token out of range")
        if np.any(t[1:, 0] != self.acoustic_pad):
            raise ValidationError("column 0 of acoustic rows must hold the acoustic pad")
        body = t[1:, 1:]
        if np.any(body < 0) or np.any(body >= self.acoustic_vocab):
            raise ValidationError("acoustic token out of range")

    def frame(self, f: int) -> np.ndarray:
        """Delay-resolved tokens of 0-based frame ``f`` (needs column f+1)."""
        if f + 1 >= self.width:
            raise IndexError(f"frame {f} is not complete in a grid of width {self.width}")
        return np.concatenate([[self.tokens[0, f]], self.tokens[1:, f + 1]])

    def frames(self) -> np.ndarray:
        """(num_complete_frames, Q) delay-resolved frame tokens."""
        n = min(self.num_frames, self.width - 1)
        return np.stack([self.frame(f) for f in range(n)]) if n else np.zeros((0, NUM_CODEBOOKS), np.int64)

    @classmethod
    def from_frames(cls, frames, semantic_vocab: int, acoustic_vocab: int) -> "TokenGrid":
        """Apply the delay to (T, Q) frame tokens and append a flush column."""
        frames = np.asarray(frames, dtype=np.int64)
        n = frames.shape[0]
        g = np.empty((NUM_CODEBOOKS, n + 1), dtype=np.int64)
        g[0, :n] = frames[:, 0]
        g[0, n] = FLUSH_SEMANTIC
        g[1:, 0] = acoustic_vocab
        g[1:, 1:] = frames[:, 1:].T
        return cls(g, semantic_vocab, acoustic_vocab, flushed=True)
