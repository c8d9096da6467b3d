"""Phoneme, temporal and depth transformers.

* The phoneme transformer (PT) turns the phoneme buffer into contextual
  embeddings. Its first layer may look ahead ``la[i]`` positions; deeper
  layers are causal, so embedding ``i`` depends on phonemes ``0..i+la[i]``
  and nothing further.
* The temporal transformer (TT) runs once per frame over
  ``[prev semantic ; phoneme b ; phoneme b+1]`` and predicts a joint
  (semantic, duration) class.
* The depth transformer (DT) runs once per column over
  ``[speaker ; TT hidden ; semantic ; acoustic 2..11]`` and predicts
  codebooks 2..12 of the previous frame (one-step acoustic delay).

Training uses the :mod:`streamtts.tensor` graph in float64; generation uses
float32 row kernels so cached and uncached paths match exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .align import DurationToken, decode_tokens
from .errors import SamplingError, StateError, ValidationError
from .grid import DURATION_VOCAB, LOOKAHEAD_CAP, NUM_ACOUSTIC, NUM_CODEBOOKS, TokenGrid
from .tensor import (AttentionMask, KVCache, ParameterStore, Tensor, attend_row, attention,
                     concat, cross_entropy, embedding, gather_rows, getitem, linear_row, matmul,
                     mul, reshape, rms_norm, rms_norm_row, rope, rope_row, rope_tables, silu_np,
                     swiglu, transpose)


@dataclass
class ModelConfig:
    phoneme_vocab: int = 32
    semantic_vocab: int = 64
    acoustic_vocab: int = 64
    speaker_dim: int = 16
    codebooks: int = NUM_CODEBOOKS
    duration_vocab: int = DURATION_VOCAB
    lookahead_cap: int = LOOKAHEAD_CAP
    pt_dim: int = 64
    pt_layers: int = 2
    pt_heads: int = 4
    pt_ff: int = 256
    tt_dim: int = 64
    tt_layers: int = 2
    tt_heads: int = 4
    tt_ff: int = 256
    dt_dim: int = 64
    dt_layers: int = 2
    dt_heads: int = 4
    dt_ff: int = 256
    use_speaker: bool = True
    tt_speaker: bool = False
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.codebooks != NUM_CODEBOOKS:
            raise ValueError(f"codebook count is fixed at {NUM_CODEBOOKS}")
        if self.duration_vocab != DURATION_VOCAB:
            raise ValueError(f"duration vocabulary is fixed at {DURATION_VOCAB}")
        if self.lookahead_cap != LOOKAHEAD_CAP:
            raise ValueError(f"look-ahead cap is fixed at {LOOKAHEAD_CAP}")
        for name in ("pt", "tt", "dt"):
            d, h = getattr(self, f"{name}_dim"), getattr(self, f"{name}_heads")
            if d % h or (d // h) % 2:
                raise ValueError(f"{name}: dim {d} must split into {h} heads of even size")

    @property
    def joint_classes(self) -> int:
        return self.semantic_vocab * DURATION_VOCAB

    @property
    def pad_class(self) -> int:
        return self.joint_classes

    @property
    def bos(self) -> int:
        return self.semantic_vocab

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def reference_scale(cls) -> "ModelConfig":
        """Reference dimensions of the full-size system (not trained here)."""
        return cls(phoneme_vocab=80, semantic_vocab=2048, acoustic_vocab=2048, speaker_dim=192,
                   pt_dim=1024, pt_layers=6, pt_heads=8, pt_ff=4096,
                   tt_dim=1024, tt_layers=12, tt_heads=16, tt_ff=4096,
                   dt_dim=1024, dt_layers=4, dt_heads=8, dt_ff=8192)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in obj.items() if k in cls.__dataclass_fields__})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class JointToken:
    semantic: int
    duration: DurationToken

    @property
    def joint_class(self) -> int:
        return self.semantic * DURATION_VOCAB + self.duration.packed_id

    @classmethod
    def from_class(cls, joint_class: int, semantic_vocab: int) -> "JointToken":
        if not 0 <= joint_class < semantic_vocab * DURATION_VOCAB:
            raise ValueError(f"class {joint_class} is not a real joint token")
        return cls(joint_class // DURATION_VOCAB, DurationToken.from_packed(joint_class % DURATION_VOCAB))


# ---------------------------------------------------------------- parameters

def _block_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple]:
    return {
        f"{prefix}attn_norm": (d,), f"{prefix}wq": (d, d), f"{prefix}wk": (d, d),
        f"{prefix}wv": (d, d), f"{prefix}wo": (d, d), f"{prefix}ffn_norm": (d,),
        f"{prefix}w1": (d, ff), f"{prefix}w3": (d, ff), f"{prefix}w2": (ff, d),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    s: dict[str, tuple] = {"pt.emb": (cfg.phoneme_vocab, cfg.pt_dim)}
    for i in range(cfg.pt_layers):
        s.update(_block_shapes(f"pt.l{i}.", cfg.pt_dim, cfg.pt_ff))
    s["pt.norm"] = (cfg.pt_dim,)
    s["tt.sem_emb"] = (cfg.semantic_vocab + 1, cfg.tt_dim)
    s["tt.w_in"] = (cfg.tt_dim + 2 * cfg.pt_dim, cfg.tt_dim)
    if cfg.tt_speaker:
        s["tt.w_spk"] = (cfg.speaker_dim, cfg.tt_dim)
    for i in range(cfg.tt_layers):
        s.update(_block_shapes(f"tt.l{i}.", cfg.tt_dim, cfg.tt_ff))
    s["tt.norm"] = (cfg.tt_dim,)
    s["tt.head"] = (cfg.tt_dim, cfg.joint_classes + 1)
    if cfg.use_speaker:
        s["dt.w_spk"] = (cfg.speaker_dim, cfg.dt_dim)
    s["dt.w_h"] = (cfg.tt_dim, cfg.dt_dim)
    s["dt.sem_emb"] = (cfg.semantic_vocab, cfg.dt_dim)
    s["dt.ac_emb"] = ((NUM_ACOUSTIC - 1) * cfg.acoustic_vocab, cfg.dt_dim)
    for i in range(cfg.dt_layers):
        s.update(_block_shapes(f"dt.l{i}.", cfg.dt_dim, cfg.dt_ff))
    s["dt.norm"] = (cfg.dt_dim,)
    s["dt.heads"] = (NUM_ACOUSTIC, cfg.dt_dim, cfg.acoustic_vocab)
    return s


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    layers = {"pt": cfg.pt_layers, "tt": cfg.tt_layers, "dt": cfg.dt_layers}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            value = np.ones(shape)
        elif leaf.endswith("emb"):
            value = rng.standard_normal(shape)
        elif leaf in ("head", "heads"):
            value = rng.standard_normal(shape) * 0.02
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[-2])
            if leaf in ("wo", "w2"):
                value /= math.sqrt(2 * layers[name[:2]])
        store.add(name, value)
    return store


class Model:
    """Trainable parameters plus the config that shapes them."""

    def __init__(self, config: ModelConfig, params: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)

    def num_params(self) -> int:
        return self.params.num_params()

    def inference(self) -> "InferenceModel":
        return InferenceModel(self.config, self.params.arrays())

    def save(self, path, meta: dict | None = None) -> None:
        m = {"model_config": self.config.to_json()}
        m.update(meta or {})
        checkpoint.save(path, self.params.arrays(), m)

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        arrays, meta = checkpoint.load(path)
        cfg = ModelConfig.from_json(meta["model_config"])
        model = cls(cfg)
        model.params.load_arrays(arrays)
        return model, meta


# ---------------------------------------------------------------- training graph

def _block(x: Tensor, p: ParameterStore, prefix: str, n_heads: int, mask, positions,
           eps: float, base: float) -> Tensor:
    *lead, t, d = x.shape
    dh = d // n_heads
    nb = len(lead)

    def heads(z):
        z = reshape(z, (*lead, t, n_heads, dh))
        return transpose(z, (*range(nb), nb + 1, nb, nb + 2))

    h = rms_norm(x, p[prefix + "attn_norm"], eps)
    q = rope(heads(matmul(h, p[prefix + "wq"])), positions, base)
    k = rope(heads(matmul(h, p[prefix + "wk"])), positions, base)
    v = heads(matmul(h, p[prefix + "wv"]))
    a = attention(q, k, v, mask)
    a = reshape(transpose(a, (*range(nb), nb + 1, nb, nb + 2)), (*lead, t, d))
    x = x + matmul(a, p[prefix + "wo"])
    h = rms_norm(x, p[prefix + "ffn_norm"], eps)
    return x + matmul(swiglu(matmul(h, p[prefix + "w1"]), matmul(h, p[prefix + "w3"])), p[prefix + "w2"])


def _stack(x: Tensor, p: ParameterStore, name: str, cfg: ModelConfig, masks) -> Tensor:
    n_layers = getattr(cfg, f"{name}_layers")
    heads = getattr(cfg, f"{name}_heads")
    positions = np.arange(x.shape[-2])
    for i in range(n_layers):
        x = _block(x, p, f"{name}.l{i}.", heads, masks[min(i, len(masks) - 1)], positions,
                   cfg.norm_eps, cfg.rope_base)
    return rms_norm(x, p[f"{name}.norm"], cfg.norm_eps)


def causal_matrix(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def lookahead_matrix(la: np.ndarray) -> np.ndarray:
    """Boolean (..., M, M) mask allowing keys j <= i + la[..., i]."""
    m = la.shape[-1]
    j = np.arange(m)
    return j[None, :] <= (np.arange(m) + la)[..., :, None]


@dataclass
class Batch:
    """Teacher-forcing arrays for B utterances or chunks (padded)."""

    pt_ids: np.ndarray       # (B, M)
    pt_la: np.ndarray        # (B, M)
    prev_sem: np.ndarray     # (B, C)
    slot_a: np.ndarray       # (B, C) 0-based phoneme index
    slot_b: np.ndarray       # (B, C)
    a_mask: np.ndarray       # (B, C) 1.0 where slot_a is a real phoneme
    b_mask: np.ndarray       # (B, C)
    tt_target: np.ndarray    # (B, C) joint class, -1 where ignored
    sem_col: np.ndarray      # (B, C) semantic token of each column
    ac_target: np.ndarray    # (B, C, 11) acoustic tokens held by each column
    dt_cols: np.ndarray      # (B, C) bool: column contributes to the depth loss
    speaker: np.ndarray      # (B, speaker_dim)

    @property
    def size(self) -> int:
        return self.pt_ids.shape[0]


def make_batch(cfg: ModelConfig, items: Sequence[tuple], la_cap: int | None = None) -> Batch:
    """Build a batch from ``(phonemes, durations, grid, speaker)`` tuples.

    The grid must carry a flush column: width == len(durations) + 1.
    """
    la_cap = cfg.lookahead_cap if la_cap is None else la_cap
    problems = []
    covs = []
    for n, (ph, dur, grid, spk) in enumerate(items):
        try:
            if not grid.flushed or grid.width != len(dur) + 1:
                raise ValidationError(f"grid width {grid.width} != {len(dur)} frames + flush column")
            covs.append(decode_tokens(dur, len(ph)))
        except Exception as exc:  # collect every offending utterance
            problems.append(f"item {n}: {exc}")
    if problems:
        raise ValidationError("inconsistent batch: " + "; ".join(problems))
    bsz = len(items)
    m = max(len(it[0]) for it in items)
    c = max(len(it[1]) + 1 for it in items)
    pt_ids = np.zeros((bsz, m), np.int64)
    pt_la = np.zeros((bsz, m), np.int64)
    prev_sem = np.full((bsz, c), cfg.bos, np.int64)
    slot_a = np.zeros((bsz, c), np.int64)
    slot_b = np.zeros((bsz, c), np.int64)
    a_mask = np.zeros((bsz, c))
    b_mask = np.zeros((bsz, c))
    tt_target = np.full((bsz, c), -1, np.int64)
    sem_col = np.zeros((bsz, c), np.int64)
    ac_target = np.zeros((bsz, c, NUM_ACOUSTIC), np.int64)
    dt_cols = np.zeros((bsz, c), bool)
    speaker = np.zeros((bsz, cfg.speaker_dim))
    for n, ((ph, dur, grid, spk), cov) in enumerate(zip(items, covs)):
        mm, t = len(ph), len(dur)
        pt_ids[n, :mm] = ph
        pt_la[n, :mm] = np.minimum(la_cap, mm - 1 - np.arange(mm))
        sem = grid.tokens[0]
        prev_sem[n, 1:t + 1] = sem[:t]
        for f, cv in enumerate(cov):
            slot_a[n, f] = cv.b - 1
            a_mask[n, f] = 1.0
            if cv.b < mm:
                slot_b[n, f] = cv.b
                b_mask[n, f] = 1.0
            tt_target[n, f] = int(sem[f]) * DURATION_VOCAB + dur[f].packed_id
        sem_col[n, :t + 1] = sem
        ac_target[n, 1:t + 1] = grid.tokens[1:, 1:t + 1].T
        dt_cols[n, 1:t + 1] = True
        speaker[n] = spk
    return Batch(pt_ids, pt_la, prev_sem, slot_a, slot_b, a_mask, b_mask, tt_target,
                 sem_col, ac_target, dt_cols, speaker)


def forward_train(model: Model, batch: Batch, dt_select: np.ndarray | None = None) -> dict:
    """Teacher-forced graph. Returns logits, targets and the two NLL losses.

    ``dt_select`` optionally lists (b, c) column pairs (shape (N, 2)) for the
    depth loss; by default every column with acoustic targets is used.
    """
    cfg, p = model.config, model.params
    bsz, m = batch.pt_ids.shape
    c = batch.prev_sem.shape[1]

    pt_masks = [lookahead_matrix(batch.pt_la)[:, None], causal_matrix(m)]
    pt_out = _stack(embedding(p["pt.emb"], batch.pt_ids), p, "pt", cfg, pt_masks)

    sa = mul(gather_rows(pt_out, batch.slot_a), batch.a_mask[..., None])
    sb = mul(gather_rows(pt_out, batch.slot_b), batch.b_mask[..., None])
    x = matmul(concat([embedding(p["tt.sem_emb"], batch.prev_sem), sa, sb], axis=-1), p["tt.w_in"])
    if cfg.tt_speaker:
        x = x + reshape(matmul(Tensor(batch.speaker), p["tt.w_spk"]), (bsz, 1, cfg.tt_dim))
    hidden = _stack(x, p, "tt", cfg, [causal_matrix(c)])
    tt_logits = matmul(hidden, p["tt.head"])
    loss_tt = cross_entropy(tt_logits, batch.tt_target, num_classes=cfg.joint_classes)

    if dt_select is None:
        dt_select = np.argwhere(batch.dt_cols)
    bi, ci = dt_select[:, 0], dt_select[:, 1]
    n = len(bi)
    d = cfg.dt_dim
    h_rows = reshape(matmul(getitem(hidden, (bi, ci)), p["dt.w_h"]), (n, 1, d))
    if cfg.use_speaker:
        spk_rows = reshape(matmul(Tensor(batch.speaker[bi]), p["dt.w_spk"]), (n, 1, d))
    else:
        spk_rows = Tensor(np.zeros((n, 1, d)))
    sem_rows = reshape(embedding(p["dt.sem_emb"], batch.sem_col[bi, ci]), (n, 1, d))
    targets = batch.ac_target[bi, ci]                       # (N, 11)
    offsets = np.arange(NUM_ACOUSTIC - 1) * cfg.acoustic_vocab
    ac_rows = embedding(p["dt.ac_emb"], targets[:, :-1] + offsets)   # (N, 10, d)
    seq = concat([spk_rows, h_rows, sem_rows, ac_rows], axis=1)     # (N, 13, d)
    dt_out = _stack(seq, p, "dt", cfg, [causal_matrix(NUM_CODEBOOKS + 1)])
    dt_h = transpose(getitem(dt_out, (slice(None), slice(2, None))), (1, 0, 2))  # (11, N, d)
    dt_logits = matmul(dt_h, p["dt.heads"])                  # (11, N, V_a)
    loss_dt = cross_entropy(dt_logits, targets.T)
    return {"loss_tt": loss_tt, "loss_dt": loss_dt, "tt_logits": tt_logits,
            "dt_logits": dt_logits, "dt_targets": targets.T, "hidden": hidden, "pt_out": pt_out}


def teacher_forced_nll(model: Model, batch: Batch, dt_select=None) -> tuple[Tensor, Tensor]:
    out = forward_train(model, batch, dt_select)
    return out["loss_tt"], out["loss_dt"]


# ---------------------------------------------------------------- sampling

def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_index(logits, temperature: float, top_k: int = 0, rng=None, allowed=None) -> int:
    """Pick a class: argmax when temperature is 0, else seeded inverse-CDF sampling."""
    z = np.asarray(logits, dtype=np.float64).copy()
    if allowed is not None:
        z[~np.asarray(allowed, dtype=bool)] = -np.inf
    if not np.isfinite(z).any():
        raise SamplingError("every class is masked")
    if temperature < 0:
        raise SamplingError("temperature must be non-negative")
    if temperature == 0:
        return int(np.argmax(z))
    z = z / temperature
    if top_k and top_k < z.size:
        kth = np.sort(z)[-top_k]
        z[z < kth] = -np.inf
    z -= z[np.isfinite(z)].max()
    w = np.exp(z)
    cdf = np.cumsum(w)
    u = _rng(rng).random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), z.size - 1))


def sample_joint(logits, temperature: float, top_k: int = 0, rng=None, allowed=None,
                 semantic_vocab: int | None = None) -> JointToken:
    """Sample from the joint head; the trailing PAD class is always masked."""
    z = np.asarray(logits)
    vs = semantic_vocab if semantic_vocab is not None else (z.size - 1) // DURATION_VOCAB
    n = vs * DURATION_VOCAB
    mask = np.zeros(z.size, dtype=bool)
    mask[:n] = True
    if allowed is not None:
        mask[:n] &= np.asarray(allowed, dtype=bool)[:n]
    return JointToken.from_class(sample_index(z, temperature, top_k, rng, mask), vs)


def duration_allowed(semantic_vocab: int, allow_count2: bool = True, allow_stay: bool = True) -> np.ndarray:
    """Joint-class mask restricting the duration part."""
    packed = np.arange(semantic_vocab * DURATION_VOCAB) % DURATION_VOCAB
    ok = np.ones(packed.size, dtype=bool)
    if not allow_count2:
        ok &= packed % 2 == 0
    if not allow_stay:
        ok &= packed >= 2
    return ok


# ---------------------------------------------------------------- inference

class _RowStack:
    """float32 copy of one transformer stack, evaluated row by row."""

    def __init__(self, arrays: dict, name: str, n_layers: int, n_heads: int, eps: float, base: float):
        self.layers = []
        for i in range(n_layers):
            pre = f"{name}.l{i}."
            self.layers.append({k: arrays[pre + k] for k in
                                ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2")})
        self.norm = arrays[f"{name}.norm"]
        self.n_heads = n_heads
        self.dim = self.norm.shape[0]
        self.dh = self.dim // n_heads
        self.eps = eps
        self.base = base
        self._rope: dict[int, tuple] = {}

    def rope_at(self, pos: int):
        if pos not in self._rope:
            self._rope[pos] = rope_tables(pos, self.dh, self.base, np.float32)
        return self._rope[pos]

    def qkv(self, layer: dict, x: np.ndarray, pos: int):
        h = rms_norm_row(x, layer["attn_norm"], self.eps)
        cos, sin = self.rope_at(pos)
        q = rope_row(linear_row(h, layer["wq"]).reshape(self.n_heads, self.dh), cos, sin).reshape(-1)
        k = rope_row(linear_row(h, layer["wk"]).reshape(self.n_heads, self.dh), cos, sin).reshape(-1)
        return q, k, linear_row(h, layer["wv"])

    def finish(self, layer: dict, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        x = x + linear_row(attn, layer["wo"])
        h = rms_norm_row(x, layer["ffn_norm"], self.eps)
        return x + linear_row(silu_np(linear_row(h, layer["w1"])) * linear_row(h, layer["w3"]), layer["w2"])

    def new_cache(self) -> list[KVCache]:
        return [KVCache(self.dim) for _ in self.layers]

    def step(self, x: np.ndarray, caches: list[KVCache], position: int | None = None) -> np.ndarray:
        """Advance one causal position; returns the final-normed output row."""
        pos = caches[0].length
        if position is not None and position != pos:
            raise StateError(f"cache holds {pos} columns but step claims column {position}")
        for layer, cache in zip(self.layers, caches):
            if cache.length != pos:
                raise StateError("per-layer caches disagree on length")
            q, k, v = self.qkv(layer, x, pos)
            cache.append(k, v)
            a = attend_row(q, cache.keys, cache.values, self.n_heads)
            x = self.finish(layer, x, a)
        return rms_norm_row(x, self.norm, self.eps)

    def full(self, xs: np.ndarray, masks: Sequence[AttentionMask], start: int = 0,
             prefix_kv: list[tuple[np.ndarray, np.ndarray]] | None = None,
             keep_kv: bool = False):
        """Layer-by-layer evaluation of rows ``start..start+len(xs)-1``.

        ``prefix_kv`` supplies each layer's key/value rows for positions
        before ``start``. Returns final-normed rows (and per-layer k/v rows
        of the computed positions when ``keep_kv``).
        """
        n = len(xs)
        xs = [np.asarray(x, dtype=np.float32) for x in xs]
        kept = []
        for li, layer in enumerate(self.layers):
            qs, ks, vs = [], [], []
            for i, x in enumerate(xs):
                q, k, v = self.qkv(layer, x, start + i)
                qs.append(q)
                ks.append(k)
                vs.append(v)
            k_new = np.stack(ks) if n else np.zeros((0, self.dim), np.float32)
            v_new = np.stack(vs) if n else np.zeros((0, self.dim), np.float32)
            if prefix_kv is not None and start:
                keys = np.concatenate([prefix_kv[li][0], k_new])
                vals = np.concatenate([prefix_kv[li][1], v_new])
            else:
                keys, vals = k_new, v_new
            if keep_kv:
                kept.append((k_new, v_new))
            mask = masks[min(li, len(masks) - 1)]
            out = []
            for i, x in enumerate(xs):
                sel = mask.keys(start + i, keys.shape[0])
                out.append(self.finish(layer, x, attend_row(qs[i], keys[sel], vals[sel], self.n_heads)))
            xs = out
        final = [rms_norm_row(x, self.norm, self.eps) for x in xs]
        return (final, kept) if keep_kv else final


class PTCache:
    """Finalized phoneme-transformer rows: per-layer k/v and output embeddings."""

    def __init__(self, n_layers: int, dim: int):
        self.kv = [(np.zeros((0, dim), np.float32), np.zeros((0, dim), np.float32)) for _ in range(n_layers)]
        self.out = np.zeros((0, dim), np.float32)

    @property
    def length(self) -> int:
        return self.out.shape[0]


class InferenceModel:
    """float32 snapshot of a model for generation."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = cfg = config
        a = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
        self.arrays = a
        self.pt = _RowStack(a, "pt", cfg.pt_layers, cfg.pt_heads, cfg.norm_eps, cfg.rope_base)
        self.tt = _RowStack(a, "tt", cfg.tt_layers, cfg.tt_heads, cfg.norm_eps, cfg.rope_base)
        self.dt = _RowStack(a, "dt", cfg.dt_layers, cfg.dt_heads, cfg.norm_eps, cfg.rope_base)
        self.zero_slot = np.zeros(cfg.pt_dim, np.float32)
        self._ac_offset = cfg.acoustic_vocab

    # -- phoneme transformer
    def new_pt_cache(self) -> PTCache:
        return PTCache(self.config.pt_layers, self.config.pt_dim)

    def pt_encode(self, phonemes: Sequence[int], la_limits: Sequence[int],
                  cache: PTCache | None = None, finalize: int = 0) -> np.ndarray:
        """Contextual embeddings (M, d) with position i seeing phonemes 0..i+la[i].

        With a cache, positions below ``cache.length`` are taken from it and
        the first ``finalize`` positions are committed to it afterwards.
        """
        la = [int(x) for x in la_limits]
        if any(x < 0 for x in la):
            raise ValueError("look-ahead limits must be non-negative")
        if len(la) != len(phonemes):
            raise ValueError("one look-ahead limit per phoneme")
        start = cache.length if cache is not None else 0
        emb = self.arrays["pt.emb"]
        xs = [emb[p] for p in phonemes[start:]]
        masks = [AttentionMask.lookahead(la), AttentionMask.causal()]
        rows, kept = self.pt.full(xs, masks, start=start,
                                  prefix_kv=cache.kv if cache is not None else None, keep_kv=True)
        new = np.stack(rows) if rows else np.zeros((0, self.config.pt_dim), np.float32)
        if cache is None:
            return new
        out = np.concatenate([cache.out, new])
        if finalize > start:
            n = finalize - start
            cache.kv = [(np.concatenate([k0, k1[:n]]), np.concatenate([v0, v1[:n]]))
                        for (k0, v0), (k1, v1) in zip(cache.kv, kept)]
            cache.out = out[:finalize].copy()
        return out

    # -- temporal transformer
    def new_tt_cache(self) -> list[KVCache]:
        return self.tt.new_cache()

    def tt_input(self, prev_semantic: int, slot_a: np.ndarray, slot_b: np.ndarray | None,
                 speaker: np.ndarray | None = None) -> np.ndarray:
        a = self.arrays
        slot_b = self.zero_slot if slot_b is None else slot_b
        x = linear_row(np.concatenate([a["tt.sem_emb"][prev_semantic], slot_a, slot_b]), a["tt.w_in"])
        if self.config.tt_speaker:
            x = x + linear_row(np.asarray(speaker, np.float32), a["tt.w_spk"])
        return x

    def tt_step(self, cache: list[KVCache], prev_semantic: int, slot_a, slot_b=None,
                speaker=None, position: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        x = self.tt_input(prev_semantic, slot_a, slot_b, speaker)
        h = self.tt.step(x, cache, position)
        return h, linear_row(h, self.arrays["tt.head"])

    def tt_full(self, inputs: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Uncached pass over TT input rows; returns (hidden rows, logit rows)."""
        hs = self.tt.full(list(inputs), [AttentionMask.causal()])
        return hs, [linear_row(h, self.arrays["tt.head"]) for h in hs]

    # -- depth transformer
    def dt_context(self, hidden: np.ndarray, semantic: int, speaker) -> list[np.ndarray]:
        a = self.arrays
        if self.config.use_speaker:
            spk = linear_row(np.asarray(speaker, np.float32), a["dt.w_spk"])
        else:
            spk = np.zeros(self.config.dt_dim, np.float32)
        return [spk, linear_row(hidden, a["dt.w_h"]), a["dt.sem_emb"][semantic]]

    def ac_embed(self, codebook_index: int, token: int) -> np.ndarray:
        """Input embedding of acoustic codebook ``codebook_index`` (0 = 2nd codebook)."""
        return self.arrays["dt.ac_emb"][codebook_index * self._ac_offset + token]

    def dt_generate(self, hidden, semantic: int, speaker, temperature: float = 0.0,
                    rng=None, top_k: int = 0) -> list[int]:
        """Acoustic tokens for codebooks 2..12, one at a time along depth."""
        rng = _rng(rng) if temperature > 0 else rng
        caches = self.dt.new_cache()
        heads = self.arrays["dt.heads"]
        ctx = self.dt_context(hidden, semantic, speaker)
        self.dt.step(ctx[0], caches)
        self.dt.step(ctx[1], caches)
        out = self.dt.step(ctx[2], caches)
        tokens = []
        for q in range(NUM_ACOUSTIC):
            tok = sample_index(linear_row(out, heads[q]), temperature, top_k, rng)
            tokens.append(tok)
            if q + 1 < NUM_ACOUSTIC:
                out = self.dt.step(self.ac_embed(q, tok), caches)
        return tokens

    def dt_logits_full(self, hidden, semantic: int, speaker, tokens: Sequence[int]) -> np.ndarray:
        """Uncached teacher-forced depth logits (11, V_a) given the 11 tokens."""
        rows = self.dt_context(hidden, semantic, speaker)
        rows += [self.ac_embed(q, t) for q, t in enumerate(tokens[:NUM_ACOUSTIC - 1])]
        outs = self.dt.full(rows, [AttentionMask.causal()])
        heads = self.arrays["dt.heads"]
        return np.stack([linear_row(outs[2 + q], heads[q]) for q in range(NUM_ACOUSTIC)])
