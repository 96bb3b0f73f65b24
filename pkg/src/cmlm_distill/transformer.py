"""Transformer blocks, the bidirectional teacher and the encoder-decoder student."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, LengthError
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    vocab_size: int = 32000
    max_len: int = 256
    tie_embeddings: bool = True
    positional: str = "sinusoidal"
    dtype: str = "float64"

    def __post_init__(self):
        if self.layers < 1 or self.d_model < 1 or self.heads < 1 or self.d_ff < 1:
            raise ConfigError(f"layers, d_model, heads and d_ff must be positive: {self}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.positional not in ("sinusoidal", "learned"):
            raise ConfigError(f"positional must be 'sinusoidal' or 'learned', got {self.positional!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.vocab_size < 1 or self.max_len < 1:
            raise ConfigError("vocab_size and max_len must be positive")

    @classmethod
    def base(cls, vocab_size: int, dropout: float = 0.1, **overrides) -> ModelConfig:
        """The 6-layer, 512-wide, 8-head, 2048-FFN configuration."""
        return cls(layers=6, d_model=512, heads=8, d_ff=2048, dropout=dropout,
                   vocab_size=vocab_size, **overrides)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}; valid keys: {sorted(names)}")
        return cls(**d)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# -- masks -------------------------------------------------------------------

@dataclass
class AttentionMask:
    """Boolean ``allowed[..., query, key]`` matrix plus the kind it was built as."""

    kind: str
    allowed: np.ndarray

    @classmethod
    def causal(cls, n: int, key_padding: np.ndarray | None = None) -> AttentionMask:
        allowed = np.tril(np.ones((n, n), dtype=bool))
        if key_padding is not None:
            allowed = allowed[None] & ~key_padding[:, None, :]
        return cls("causal", allowed)

    @classmethod
    def bidirectional(cls, key_padding: np.ndarray) -> AttentionMask:
        """Self-attention where only padding keys are hidden. ``key_padding``: (B, S), True = pad."""
        s = key_padding.shape[-1]
        allowed = np.broadcast_to(~key_padding[:, None, :], (key_padding.shape[0], s, s))
        return cls("bidirectional", allowed)

    @classmethod
    def padding_only(cls, query_len: int, key_padding: np.ndarray) -> AttentionMask:
        """Cross-attention mask: every query sees every non-pad key."""
        b, s = key_padding.shape
        return cls("padding-only", np.broadcast_to(~key_padding[:, None, :], (b, query_len, s)))

    @classmethod
    def target_causal(cls, segment_ids: np.ndarray, key_padding: np.ndarray) -> AttentionMask:
        """Left-to-right over the target span of a packed source/target sequence.

        Source-span queries (segment 0) see the source span only; target-span
        queries see the whole source span plus target positions up to and
        including themselves.  No information flows from later target tokens
        to any earlier position.
        """
        b, n = segment_ids.shape
        q_src = (segment_ids == 0)[:, :, None]
        k_src = (segment_ids == 0)[:, None, :]
        lower = np.tril(np.ones((n, n), dtype=bool))[None]
        allowed = np.where(q_src, k_src, k_src | lower) & ~key_padding[:, None, :]
        return cls("causal", allowed)


def sinusoidal_table(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-np.log(10000.0) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return table.astype(dtype)


# -- blocks ------------------------------------------------------------------

class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, dropout: float, rng: np.random.Generator, dtype=np.float64):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)
        self.heads = heads
        self.d_model = d_model
        self.dropout = dropout
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_model // self.heads).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, memory: Tensor, mask: AttentionMask | None = None, rng=None) -> Tensor:
        """Scaled dot-product attention of ``query`` (B, Tq, d) over ``memory`` (B, Tk, d)."""
        if query.ndim != 3 or memory.ndim != 3 or query.shape[-1] != self.d_model or memory.shape[-1] != self.d_model:
            raise DimensionError(f"attention inputs must be (B, T, {self.d_model}); got {query.shape} and {memory.shape}")
        b, tq, _ = query.shape
        tk = memory.shape[1]
        allowed = None
        if mask is not None:
            allowed = mask.allowed
            if allowed.shape[-2:] != (tq, tk) or (allowed.ndim == 3 and allowed.shape[0] not in (1, b)):
                raise DimensionError(f"mask shape {allowed.shape} does not match (query_len, key_len) = ({tq}, {tk})")
            allowed = allowed[:, None] if allowed.ndim == 3 else allowed
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        dh = self.d_model // self.heads
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        weights = T.softmax(scores, axis=-1, mask=allowed)
        self.last_weights = weights.data
        weights = T.dropout(weights, self.dropout, rng, self.training)
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, tq, self.d_model)
        return self.wo(ctx)


class EncoderLayer(Module):
    """Post-norm block: ``x = LN(x + attn(x)); x = LN(x + ffn(x))``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout, rng, dt)
        self.norm1 = LayerNorm(cfg.d_model, dt)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, rng, dt)
        self.norm2 = LayerNorm(cfg.d_model, dt)
        self.dropout = cfg.dropout

    def forward(self, x: Tensor, mask: AttentionMask, rng=None) -> Tensor:
        h = T.dropout(self.attn(x, x, mask, rng), self.dropout, rng, self.training)
        x = self.norm1(x + h)
        h = T.dropout(self.ffn(x, rng), self.dropout, rng, self.training)
        return self.norm2(x + h)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout, rng, dt)
        self.norm1 = LayerNorm(cfg.d_model, dt)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout, rng, dt)
        self.norm2 = LayerNorm(cfg.d_model, dt)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, rng, dt)
        self.norm3 = LayerNorm(cfg.d_model, dt)
        self.dropout = cfg.dropout

    def forward(self, y: Tensor, memory: Tensor, self_mask: AttentionMask, cross_mask: AttentionMask, rng=None) -> Tensor:
        h = T.dropout(self.self_attn(y, y, self_mask, rng), self.dropout, rng, self.training)
        y = self.norm1(y + h)
        h = T.dropout(self.cross_attn(y, memory, cross_mask, rng), self.dropout, rng, self.training)
        y = self.norm2(y + h)
        h = T.dropout(self.ffn(y, rng), self.dropout, rng, self.training)
        return self.norm3(y + h)


def _check_len(n: int, cfg: ModelConfig, what: str) -> None:
    if n > cfg.max_len:
        raise LengthError(f"{what} length {n} exceeds max_len={cfg.max_len}")


class _Positions(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.positional == "learned":
            self.table = Embedding(cfg.max_len, cfg.d_model, rng, cfg.np_dtype, std=0.02)
        else:
            self.fixed = sinusoidal_table(cfg.max_len, cfg.d_model, cfg.np_dtype)

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[1]
        if hasattr(self, "table"):
            return x + self.table(np.arange(n))
        return x + self.fixed[:n]


# -- models ------------------------------------------------------------------

class Student(Module):
    """Encoder-decoder giving next-token logits ``P(y_t | y_<t, X)``.

    Source and target share one embedding table (joint vocabulary); with
    ``tie_embeddings`` the output projection reuses it too.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        dt = cfg.np_dtype
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng, dt)
        self.positions = _Positions(cfg, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        if not cfg.tie_embeddings:
            self.out_proj = Linear(cfg.d_model, cfg.vocab_size, rng, dt, bias=False)
        self.scale = float(np.sqrt(cfg.d_model))
        self.assign_names()

    def _embed(self, ids: np.ndarray, rng) -> Tensor:
        x = self.positions(self.embed(ids) * self.scale)
        return T.dropout(x, self.config.dropout, rng, self.training)

    def encode(self, src: np.ndarray, src_pad: np.ndarray | None = None, rng=None) -> Tensor:
        src = np.atleast_2d(src)
        _check_len(src.shape[1], self.config, "source")
        if src_pad is None:
            src_pad = src == PAD_ID
        x = self._embed(src, rng)
        mask = AttentionMask.bidirectional(src_pad)
        for layer in self.encoder:
            x = layer(x, mask, rng)
        return x

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_pad: np.ndarray, rng=None) -> Tensor:
        tgt_in = np.atleast_2d(tgt_in)
        _check_len(tgt_in.shape[1], self.config, "target")
        n = tgt_in.shape[1]
        y = self._embed(tgt_in, rng)
        self_mask = AttentionMask.causal(n)
        cross_mask = AttentionMask.padding_only(n, src_pad)
        for layer in self.decoder:
            y = layer(y, memory, self_mask, cross_mask, rng)
        return self.project(y)

    def project(self, h: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            return T.matmul(h, self.embed.weight.transpose())
        return self.out_proj(h)

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, src_pad: np.ndarray | None = None, rng=None) -> Tensor:
        """Teacher-forced logits, shape (B, target_len, vocab)."""
        src = np.atleast_2d(src)
        if src_pad is None:
            src_pad = src == PAD_ID
        memory = self.encode(src, src_pad, rng)
        return self.decode(tgt_in, memory, src_pad, rng)

    def num_parameters(self, exclude_embeddings: bool = False) -> int:
        if not exclude_embeddings:
            return super().num_parameters()
        skip = ("embed.", "positions.", "out_proj.")
        return sum(p.data.size for n, p in self.named_parameters() if not n.startswith(skip))


class Teacher(Module):
    """Encoder-only masked LM over a packed ``[CLS] X [SEP] Y [SEP]`` sequence.

    Token, learned position and segment embeddings are summed and
    layer-normalised.  With ``causal=True`` the target span is attended
    left-to-right (see :meth:`AttentionMask.target_causal`).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, causal: bool = False):
        self.config = cfg
        self.causal = causal
        dt = cfg.np_dtype
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng, dt)
        self.positions = _Positions(cfg, rng)
        self.segments = Embedding(2, cfg.d_model, rng, dt, std=0.02)
        self.emb_norm = LayerNorm(cfg.d_model, dt)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]
        if not cfg.tie_embeddings:
            self.out_proj = Linear(cfg.d_model, cfg.vocab_size, rng, dt, bias=False)
        self.out_bias = Parameter(np.zeros(cfg.vocab_size, dtype=dt))
        self.scale = float(np.sqrt(cfg.d_model))
        self.assign_names()

    def attention_mask(self, segment_ids: np.ndarray, padding: np.ndarray) -> AttentionMask:
        if self.causal:
            return AttentionMask.target_causal(segment_ids, padding)
        return AttentionMask.bidirectional(padding)

    def forward(self, input_ids: np.ndarray, segment_ids: np.ndarray, padding: np.ndarray | None = None, rng=None) -> Tensor:
        """Logits at every position, shape (B, seq_len, vocab)."""
        input_ids = np.atleast_2d(input_ids)
        segment_ids = np.atleast_2d(segment_ids)
        if input_ids.shape != segment_ids.shape:
            raise DimensionError(f"input ids {input_ids.shape} vs segment ids {segment_ids.shape}")
        _check_len(input_ids.shape[1], self.config, "packed sequence")
        if padding is None:
            padding = input_ids == PAD_ID
        x = self.embed(input_ids) * self.scale + self.segments(segment_ids)
        x = self.emb_norm(self.positions(x))
        x = T.dropout(x, self.config.dropout, rng, self.training)
        mask = self.attention_mask(segment_ids, padding)
        for layer in self.layers:
            x = layer(x, mask, rng)
        if self.config.tie_embeddings:
            logits = T.matmul(x, self.embed.weight.transpose())
        else:
            logits = self.out_proj(x)
        return logits + self.out_bias

    def num_parameters(self, exclude_embeddings: bool = False) -> int:
        if not exclude_embeddings:
            return super().num_parameters()
        skip = ("embed.", "positions.", "segments.", "out_proj.", "out_bias")
        return sum(p.data.size for n, p in self.named_parameters() if not n.startswith(skip))


def build_student(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> Student:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Student(cfg, rng)


def build_teacher(cfg: ModelConfig, seed: int | np.random.Generator = 0, causal: bool = False) -> Teacher:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Teacher(cfg, rng, causal=causal)


def count_parameters(cfg: ModelConfig, kind: str = "student") -> int:
    """Trainable parameters excluding embeddings and the output projection.

    Computed from the configuration alone, so it can be evaluated at full
    base scale without allocating the model.
    """
    d, f = cfg.d_model, cfg.d_ff
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norm = 2 * d
    enc = attn + ffn + 2 * norm
    if kind == "student":
        dec = 2 * attn + ffn + 3 * norm
        return cfg.layers * (enc + dec)
    if kind == "teacher":
        return cfg.layers * enc + norm
    raise ValueError(f"kind must be 'student' or 'teacher', got {kind!r}")
