"""Training objectives: generation cross-entropy and contrastive matching."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


def generation_loss(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean cross-entropy over non-pad target tokens.

    Expects teacher-forced alignment: logits[..., t, :] score targets[..., t].
    """
    return T.cross_entropy(logits, targets, ignore_id=pad_id)


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale last-axis rows to unit length; zero rows are an error."""
    sq = T.sum_(T.mul(x, x), axis=-1, keepdims=True)
    if np.any(sq.data <= eps):
        raise ValueError("cannot L2-normalize a zero-norm embedding")
    return T.div(x, T.sqrt(sq))


def pool_for_matching(seq: Tensor, mask: Optional[np.ndarray],
                      projection) -> Tensor:
    """Masked mean-pool, project to the contrastive dim, L2-normalize.

    seq is (S, d) or (batch, S, d); mask marks real tokens with True.
    """
    was_batched = seq.ndim == 3
    if not was_batched:
        seq = T.reshape(seq, (1,) + seq.shape)
    b, s, _ = seq.shape
    if mask is None:
        mask = np.ones((b, s), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if not mask.any(axis=-1).all():
            raise ValueError("cannot pool a fully masked sequence")
    gate = mask.astype(seq.dtype.type)[..., None]
    counts = mask.sum(axis=-1, keepdims=True).astype(seq.dtype.type)
    pooled = T.mul(T.sum_(T.mul(seq, gate), axis=1), 1.0 / counts)
    out = l2_normalize(projection(pooled))
    return out if was_batched else T.reshape(out, (out.shape[-1],))


def info_nce(video: Tensor, text: Tensor,
             temperature: Union[Tensor, float]) -> Tensor:
    """Symmetric InfoNCE over aligned (video_i, text_i) pairs.

    Rows are L2-normalized, scores are v̂·t̂ᵀ/τ, and the loss averages the
    row-wise (video→text) and column-wise (text→video) cross-entropies with
    diagonal targets.
    """
    n = video.shape[0]
    if video.shape != text.shape or video.ndim != 2:
        raise T.ShapeError(
            f"matching batch shapes differ: {video.shape} vs {text.shape}"
        )
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    v = l2_normalize(video)
    t = l2_normalize(text)
    sim = T.div(T.matmul(v, T.transpose(t, (1, 0))), temperature)
    labels = np.arange(n)
    rows = T.cross_entropy(sim, labels)
    cols = T.cross_entropy(T.transpose(sim, (1, 0)), labels)
    return T.mul(T.add(rows, cols), 0.5)


def clamp_temperature(tau: Tensor, lo: float = 0.01, hi: float = 1.0) -> None:
    """Clip a learnable temperature in place; call after each optimizer step."""
    np.clip(tau.data, lo, hi, out=tau.data)
