"""Transformer building blocks: attention, encoder stacks, causal decoder.

Sequence modules accept a single (seq, d) sequence or a (batch, seq, d)
block; masks are boolean arrays with True marking real (unpadded) positions.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Dropout, Embedding, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor


class MaskedOutError(ValueError):
    """An attention row had every key masked away."""


class SequenceTooLongError(ValueError):
    """Input sequence exceeds the configured maximum length."""


def sinusoidal_encoding(max_len: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table, shape (max_len, dim)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / dim)
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), False
    return x, True


def _batched_mask(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return mask[None, :] if mask.ndim == 1 else mask


class MultiHeadAttention(Module):
    """Scaled dot-product attention with `heads` parallel heads, dim d."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor, batch: int, seq: int) -> Tensor:
        return T.transpose(T.reshape(x, (batch, seq, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(
        self,
        query: Tensor,
        keyval: Tensor,
        key_mask: Optional[np.ndarray] = None,
        causal: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Attend `query` over `keyval`; returns (output, attention weights).

        Weights come back as (heads, q, k) for 2-d inputs and
        (batch, heads, q, k) for 3-d inputs, rows stochastic over unmasked keys.
        """
        q3, was_batched = _batched(query)
        kv3, _ = _batched(keyval)
        key_mask = _batched_mask(key_mask)
        b, qlen, _ = q3.shape
        klen = kv3.shape[1]

        q = self._split(self.wq(q3), b, qlen)
        k = self._split(self.wk(kv3), b, klen)
        v = self._split(self.wv(kv3), b, klen)

        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.mul(scores, 1.0 / np.sqrt(self.head_dim))

        blocked = np.zeros((b, 1, qlen, klen), dtype=bool)
        if key_mask is not None:
            blocked |= ~key_mask[:, None, None, :]
        if causal:
            blocked |= np.triu(np.ones((qlen, klen), dtype=bool), k=1)[None, None]
        if blocked.any():
            if blocked.all(axis=-1).any():
                raise MaskedOutError("attention row with every key masked")
            scores = T.mask_fill(scores, blocked, -np.inf)

        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, qlen, self.dim))
        out = self.wo(ctx)
        if not was_batched:
            out = T.reshape(out, (qlen, self.dim))
            weights = T.reshape(weights, (self.heads, qlen, klen))
        return out, weights


class FeedForward(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator):
        super().__init__()
        self.lift = Linear(dim, inner, rng)
        self.drop = Linear(inner, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.drop(T.gelu(self.lift(x)))


class EncoderLayer(Module):
    """Pre-layer-norm residual block: self-attention then feed-forward."""

    def __init__(self, dim: int, heads: int, ff_mult: int, dropout: float, rng):
        super().__init__()
        self.norm_attn = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)
        self.dropout = Dropout(dropout)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        a = self.norm_attn(x)
        attn_out, _ = self.self_attn(a, a, key_mask=mask)
        x = T.add(x, self.dropout(attn_out))
        x = T.add(x, self.dropout(self.ff(self.norm_ff(x))))
        return x


class EncoderStack(Module):
    """N encoder layers over an already-embedded sequence."""

    def __init__(self, dim: int, layers: int, heads: int, max_len: int,
                 ff_mult: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.layers = ModuleList(
            EncoderLayer(dim, heads, ff_mult, dropout, rng) for _ in range(layers)
        )
        self.final_norm = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x3, was_batched = _batched(x)
        if x3.shape[1] > self.max_len:
            raise SequenceTooLongError(
                f"sequence length {x3.shape[1]} exceeds encoder max {self.max_len}"
            )
        mask = _batched_mask(mask)
        for layer in self.layers:
            x3 = layer(x3, mask)
        out = self.final_norm(x3)
        return out if was_batched else T.reshape(out, out.shape[1:])


class DecoderLayer(Module):
    """Pre-LN block: causal self-attention, cross-attention over memory, FF."""

    def __init__(self, dim: int, heads: int, ff_mult: int, dropout: float, rng):
        super().__init__()
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)
        self.dropout = Dropout(dropout)

    def __call__(self, x: Tensor, memory: Tensor, memory_mask: Optional[np.ndarray]) -> Tensor:
        a = self.norm_self(x)
        self_out, _ = self.self_attn(a, a, causal=True)
        x = T.add(x, self.dropout(self_out))
        cross_out, _ = self.cross_attn(self.norm_cross(x), memory, key_mask=memory_mask)
        x = T.add(x, self.dropout(cross_out))
        x = T.add(x, self.dropout(self.ff(self.norm_ff(x))))
        return x


class DecoderStack(Module):
    """Causal token decoder with cross-attention and vocabulary projection."""

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int,
                 max_len: int, ff_mult: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.embed = Embedding(vocab_size, dim, rng)
        self.pos_table = sinusoidal_encoding(max_len, dim)
        self.embed_dropout = Dropout(dropout)
        self.layers = ModuleList(
            DecoderLayer(dim, heads, ff_mult, dropout, rng) for _ in range(layers)
        )
        self.final_norm = LayerNorm(dim)
        self.out_proj = Linear(dim, vocab_size, rng)

    def _embed(self, ids: np.ndarray) -> Tensor:
        seq_len = ids.shape[-1]
        x = T.mul(self.embed(ids), np.sqrt(self.dim))
        x = T.add(x, self.pos_table[:seq_len].astype(T.default_dtype()))
        return self.embed_dropout(x)

    def __call__(self, ids: np.ndarray, memory: Tensor,
                 memory_mask: Optional[np.ndarray] = None) -> Tensor:
        """Teacher-forced pass: logits[..., t, :] score the token after position t."""
        ids = np.asarray(ids)
        if ids.shape[-1] > self.max_len:
            raise SequenceTooLongError(
                f"target length {ids.shape[-1]} exceeds decoder max {self.max_len}"
            )
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        mem3, _ = _batched(memory)
        memory_mask = _batched_mask(memory_mask)
        x = self._embed(ids)
        for layer in self.layers:
            x = layer(x, mem3, memory_mask)
        logits = self.out_proj(self.final_norm(x))
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    def decode_step(self, prefix_ids: np.ndarray, memory: Tensor,
                    memory_mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Next-token logits for one prefix (T,) or a stack of prefixes (B, T)."""
        prefix_ids = np.asarray(prefix_ids)
        if prefix_ids.shape[-1] == 0:
            raise ValueError("decode_step needs a non-empty prefix starting at BOS")
        if prefix_ids.shape[-1] > self.max_len:
            raise SequenceTooLongError(
                f"prefix length {prefix_ids.shape[-1]} exceeds decoder max {self.max_len}"
            )
        with T.no_grad():
            logits = self(prefix_ids, memory, memory_mask)
        return logits.data[..., -1, :]
