"""Joint-modality fusion: one attention pass yields both decoder memory halves.

Text queries attend over video keys. The attended values enhance the text side
(g); the same attention mass, pooled per video token, gates the video side (h):
tokens the text already explains are damped, tokens it ignores pass through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import AllPaddedError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class FusionOutput:
    fused: Tensor       # (m+l, d) decoder memory
    g: Tensor           # (m, d) video-enhanced text
    p: Tensor           # (l,) attention mass per video token
    h: Tensor           # (l, d) gated video
    attention: Tensor   # (heads, m, l)
    memory_mask: np.ndarray  # (m+l,) bool; h rows always True


def gates_from_relevance(p: Tensor, m_unpadded: np.ndarray) -> Tensor:
    """Turn pooled attention mass p (batch, l) into gate weights in [0, 1].

    r = p / m_unpadded is each video token's share of text attention; the gate
    is (1 - r) max-normalized so the least text-covered token keeps full
    magnitude. With a single video token the gate is fixed at 1.
    """
    l = p.shape[-1]
    if l == 1:
        return Tensor(np.ones_like(p.data))
    scale = (1.0 / np.asarray(m_unpadded, dtype=p.dtype.type))[..., None]
    r = T.mul(p, scale)
    one_minus = T.sub(1.0, r)
    return T.div(one_minus, T.max_(one_minus, axis=-1, keepdims=True))


class JointModalityLayer(Module):
    """Two-way fusion of text states (m, d) and video states (l, d)."""

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
        # silent start: a fresh layer must not disturb the grafted text states,
        # so the enhancement projection begins at zero and g == e_t exactly
        self.wo.weight.data = np.zeros_like(self.wo.weight.data)

    def fuse(self, e_t: Tensor, e_v: Tensor,
             text_mask: Optional[np.ndarray] = None) -> FusionOutput:
        if e_t.shape[-1] != self.dim or e_v.shape[-1] != self.dim:
            raise T.ShapeError(
                f"fusion needs dim {self.dim} on both sides, got text "
                f"{e_t.shape} and video {e_v.shape}"
            )
        was_batched = e_t.ndim == 3
        t3 = e_t if was_batched else T.reshape(e_t, (1,) + e_t.shape)
        v3 = e_v if e_v.ndim == 3 else T.reshape(e_v, (1,) + e_v.shape)
        b, m, _ = t3.shape
        l = v3.shape[1]
        if text_mask is None:
            text_mask = np.ones((b, m), dtype=bool)
        else:
            text_mask = np.asarray(text_mask, dtype=bool)
            if text_mask.ndim == 1:
                text_mask = text_mask[None, :]
            if not text_mask.any(axis=-1).all():
                raise AllPaddedError("fusion input with every text token padded")

        def split(x, seq):
            return T.transpose(T.reshape(x, (b, seq, self.heads, self.head_dim)),
                               (0, 2, 1, 3))

        q = split(self.wq(t3), m)
        k = split(self.wk(v3), l)
        v = split(self.wv(v3), l)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                       1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)  # (b, heads, m, l)

        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, m, self.dim))
        enhanced = self.wo(ctx)
        query_gate = text_mask.astype(t3.dtype.type)[..., None]  # (b, m, 1)
        g = T.add(t3, T.mul(enhanced, query_gate))

        head_avg = T.mean(attn, axis=1)            # (b, m, l)
        pooled = T.mul(head_avg, query_gate)       # padded queries drop out
        p = T.sum_(pooled, axis=-2)                # (b, l)
        w = gates_from_relevance(p, text_mask.sum(axis=-1))
        h = T.mul(v3, T.reshape(w, (b, l, 1)))

        fused = T.concat([g, h], axis=1)
        memory_mask = np.concatenate(
            [text_mask, np.ones((b, l), dtype=bool)], axis=1
        )
        if not was_batched:
            return FusionOutput(
                fused=T.reshape(fused, (m + l, self.dim)),
                g=T.reshape(g, (m, self.dim)),
                p=T.reshape(p, (l,)),
                h=T.reshape(h, (l, self.dim)),
                attention=T.reshape(attn, (self.heads, m, l)),
                memory_mask=memory_mask[0],
            )
        return FusionOutput(fused=fused, g=g, p=p, h=h, attention=attn,
                            memory_mask=memory_mask)


def fuse_ablation_concat(e_t: Tensor, e_v: Tensor) -> Tensor:
    """Baseline memory: rows of e_t then rows of e_v, untouched."""
    if e_t.shape[-1] != e_v.shape[-1]:
        raise T.ShapeError(
            f"concat fusion needs matching dims, got {e_t.shape} and {e_v.shape}"
        )
    return T.concat([e_t, e_v], axis=e_t.ndim - 2)


def fuse_ablation_crossattn(layer: JointModalityLayer, e_t: Tensor, e_v: Tensor,
                            text_mask: Optional[np.ndarray] = None) -> Tensor:
    """Baseline memory: the enhanced text half only, video tokens dropped."""
    return layer.fuse(e_t, e_v, text_mask).g
