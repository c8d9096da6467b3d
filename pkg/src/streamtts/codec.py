"""Sinusoid-bank stand-in for a neural audio codec.

Every (row, token) pair owns one DFT bin of the 80 ms frame, so a frame of 12
tokens decodes to a sum of 12 tones and encodes back by picking the loudest
bin in each row's bank.
"""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AmbiguityError, DimensionError
from .grid import NUM_CODEBOOKS


@dataclass(frozen=True)
class CodecSpec:
    frame_rate: float = 12.5
    sample_rate: int = 24000
    codebooks: int = NUM_CODEBOOKS
    semantic_vocab: int = 64
    acoustic_vocab: int = 64
    first_bin: int = 8
    amplitude: float = 0.08
    taper_ms: float = 2.0

    def __post_init__(self):
        spf = self.sample_rate / self.frame_rate
        if spf != int(spf):
            raise ValueError("sample_rate / frame_rate must be an integer")
        if self.codebooks != NUM_CODEBOOKS:
            raise ValueError(f"codec geometry is fixed at {NUM_CODEBOOKS} codebooks")
        if self.first_bin + sum(self.vocab_sizes) > self.samples_per_frame // 2:
            raise ValueError("frequency banks exceed the Nyquist bin")

    @property
    def samples_per_frame(self) -> int:
        return int(self.sample_rate / self.frame_rate)

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return (self.semantic_vocab,) + (self.acoustic_vocab,) * (self.codebooks - 1)

    def bank(self, row: int) -> np.ndarray:
        """DFT bin indices assigned to ``row``; token v uses ``bank(row)[v]``."""
        start = self.first_bin + sum(self.vocab_sizes[:row])
        return np.arange(start, start + self.vocab_sizes[row])

    def frequency(self, row: int, token: int) -> float:
        return float(self.bank(row)[token]) * self.sample_rate / self.samples_per_frame


@functools.lru_cache(maxsize=8)
def _tables(spec: CodecSpec):
    n = spec.samples_per_frame
    t = np.arange(n, dtype=np.float64)
    taper_len = int(round(spec.taper_ms * 1e-3 * spec.sample_rate))
    w = np.ones(n)
    if taper_len:
        ramp = 0.5 * (1.0 - np.cos(np.pi * (np.arange(taper_len) + 0.5) / taper_len))
        w[:taper_len] = ramp
        w[n - taper_len:] = ramp[::-1]
    tones = []
    for q in range(spec.codebooks):
        phase = 0.7 * q
        bins = spec.bank(q)[:, None]
        tones.append(spec.amplitude * np.sin(2.0 * np.pi * bins * t / n + phase) * w)
    return tones


def _check_tokens(tokens, spec: CodecSpec) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (spec.codebooks,):
        raise DimensionError(f"a frame holds {spec.codebooks} tokens, got shape {tokens.shape}")
    for q, (tok, v) in enumerate(zip(tokens, spec.vocab_sizes)):
        if not 0 <= tok < v:
            raise ValueError(f"row {q}: token {tok} outside vocabulary of {v}")
    return tokens


def decode_frame(tokens, spec: CodecSpec = CodecSpec()) -> np.ndarray:
    """Waveform (samples_per_frame,) for one delay-resolved frame of tokens."""
    tokens = _check_tokens(tokens, spec)
    tones = _tables(spec)
    rows = np.stack([tones[q][tok] for q, tok in enumerate(tokens)])
    return rows.sum(axis=0)


def decode_frames(frames, spec: CodecSpec = CodecSpec()) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64).reshape(-1, spec.codebooks)
    if len(frames) == 0:
        return np.zeros(0)
    return np.concatenate([decode_frame(f, spec) for f in frames])


def encode_frame(samples, spec: CodecSpec = CodecSpec(), rel_tol: float = 1e-6) -> np.ndarray:
    """Token ids recovered by the strongest matched-filter bin per row."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape != (spec.samples_per_frame,):
        raise DimensionError(f"expected {spec.samples_per_frame} samples, got {samples.shape}")
    mags = np.abs(np.fft.rfft(samples))
    out = np.empty(spec.codebooks, dtype=np.int64)
    for q in range(spec.codebooks):
        resp = mags[spec.bank(q)]
        best = int(np.argmax(resp))
        top = resp[best]
        runner = np.max(np.delete(resp, best))
        if top <= 0.0 or runner >= top * (1.0 - rel_tol):
            raise AmbiguityError(f"row {q}: no unique peak in its frequency bank")
        out[q] = best
    return out


def encode_frames(samples, spec: CodecSpec = CodecSpec()) -> np.ndarray:
    n = spec.samples_per_frame
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size % n:
        raise DimensionError("sample count is not a whole number of frames")
    return np.stack([encode_frame(samples[i:i + n], spec) for i in range(0, samples.size, n)])


def to_pcm16(samples) -> bytes:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(x * 32767.0).astype("<i2").tobytes()


def write_wav(path, samples, sample_rate: int = 24000) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(to_pcm16(samples))


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError("expected mono 16-bit PCM")
        raw = w.readframes(w.getnframes())
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, w.getframerate()


class WavStreamWriter:
    """Append frames to a 16-bit mono WAV file as they arrive."""

    def __init__(self, path, sample_rate: int = 24000):
        self._w = wave.open(str(Path(path)), "wb")
        self._w.setnchannels(1)
        self._w.setsampwidth(2)
        self._w.setframerate(sample_rate)

    def write(self, samples) -> None:
        self._w.writeframes(to_pcm16(samples))

    def close(self) -> None:
        self._w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
