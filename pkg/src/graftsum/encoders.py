"""Modality encoders: text with a masked-word head, video over frame features.

Frame indices are 1-based throughout (index i picks feature row i-1), so the
sampler output reads directly as frame numbers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Dropout, Embedding, Linear, Module
from .tensor import Tensor
from .transformer import EncoderStack, sinusoidal_encoding

FRAME_MAGIC = b"GRFF"
FRAME_VERSION = 1


class AllPaddedError(ValueError):
    """A text sample contained no real tokens."""


@dataclass
class FrameSampler:
    """Maps l token slots onto s frames, one frame per stratum.

    mode "eval" picks strata centers deterministically; mode "train" draws one
    uniform index per stratum, keyed by (seed, sample_id, pass_index) so every
    epoch resamples reproducibly.
    """

    token_count: int
    mode: str = "eval"
    seed: int = 0

    def __post_init__(self):
        if self.token_count < 1:
            raise ValueError("token count must be >= 1")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")

    def indices(self, s: int, sample_id: int = 0, pass_index: int = 0) -> np.ndarray:
        if s < 1:
            raise ValueError("frame count must be >= 1")
        l = self.token_count
        i = np.arange(1, l + 1, dtype=np.int64)
        if self.mode == "eval":
            return -(-(2 * i - 1) * s // (2 * l))  # ceil of (2i-1)s/(2l)
        lo = (i - 1) * s // l + 1
        hi = -(-i * s // l)
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, sample_id, pass_index])
        )
        return rng.integers(lo, hi + 1)


def sample_frames(sampler: FrameSampler, s: int, sample_id: int = 0,
                  pass_index: int = 0) -> np.ndarray:
    """1-based frame indices, length sampler.token_count, non-decreasing."""
    return sampler.indices(s, sample_id, pass_index)


class TextEncoder(Module):
    """Token embedding + positions + encoder stack."""

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int,
                 max_len: int, rng: np.random.Generator,
                 ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.embed = Embedding(vocab_size, dim, rng)
        self.pos_table = sinusoidal_encoding(max_len, dim)
        self.embed_dropout = Dropout(dropout)
        self.stack = EncoderStack(dim, layers, heads, max_len, ff_mult, dropout, rng)

    def __call__(self, ids: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
        ids = np.asarray(ids)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if not mask.any(axis=-1).all():
                raise AllPaddedError("text sample with every position padded")
        x = T.mul(self.embed(ids), np.sqrt(self.dim))
        x = T.add(x, self.pos_table[: ids.shape[-1]].astype(T.default_dtype()))
        return self.stack(self.embed_dropout(x), mask)


class VideoEncoder(Module):
    """Projects sampled frame features to model dim and encodes them."""

    def __init__(self, feature_dim: int, dim: int, layers: int, heads: int,
                 max_tokens: int, rng: np.random.Generator,
                 ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.feature_dim = feature_dim
        self.dim = dim
        self.proj = Linear(feature_dim, dim, rng)
        self.pos_table = sinusoidal_encoding(max_tokens, dim)
        self.embed_dropout = Dropout(dropout)
        self.stack = EncoderStack(dim, layers, heads, max_tokens, ff_mult, dropout, rng)

    def __call__(self, tokens) -> Tensor:
        """Encode already-sampled frame rows, (l, d_video) or (batch, l, d_video)."""
        if not isinstance(tokens, Tensor):
            tokens = Tensor(np.asarray(tokens))
        if tokens.shape[-1] != self.feature_dim:
            raise T.ShapeError(
                f"frame feature dim {tokens.shape[-1]} != configured {self.feature_dim}"
            )
        x = self.proj(tokens)
        x = T.add(x, self.pos_table[: tokens.shape[-2]].astype(T.default_dtype()))
        return self.stack(self.embed_dropout(x))


def encode_video(encoder: VideoEncoder, frame_features: np.ndarray,
                 sampler: FrameSampler, sample_id: int = 0,
                 pass_index: int = 0) -> Tensor:
    """Sample one video's frames and encode them to (l, d)."""
    frame_features = np.asarray(frame_features)
    if frame_features.ndim != 2:
        raise T.ShapeError("frame features must be a (s, d_video) matrix")
    if not np.all(np.isfinite(frame_features)):
        raise ValueError("frame features contain non-finite values")
    idx = sampler.indices(frame_features.shape[0], sample_id, pass_index)
    return encoder(frame_features[idx - 1])


class MlmHead(Module):
    """Untied projection from encoder states to vocabulary logits."""

    def __init__(self, dim: int, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(dim, vocab_size, rng)

    def __call__(self, states: Tensor) -> Tensor:
        return self.proj(states)


def mlm_loss(head: MlmHead, encoded: Tensor, masked_positions: np.ndarray,
             original_ids: np.ndarray) -> Tensor:
    """Cross-entropy of the head's predictions at masked positions only."""
    masked_positions = np.asarray(masked_positions, dtype=bool)
    original_ids = np.asarray(original_ids)
    if masked_positions.shape != original_ids.shape:
        raise T.ShapeError("masked-position mask must match the id array shape")
    if not masked_positions.any():
        raise ValueError("mlm_loss needs at least one masked position")
    dim = encoded.shape[-1]
    flat = T.reshape(encoded, (-1, dim))
    rows = np.flatnonzero(masked_positions.reshape(-1))
    picked = T.embedding_lookup(flat, rows)
    targets = original_ids.reshape(-1)[rows]
    return T.cross_entropy(head(picked), targets)


def write_frame_features(path, features: np.ndarray) -> None:
    """Serialize one video's frame features: header then row-major f32 LE."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError("frame features must be a 2-d matrix")
    s, d_video = features.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<III", FRAME_VERSION, s, d_video))
        fh.write(features.astype("<f4").tobytes(order="C"))


def read_frame_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FRAME_MAGIC:
            raise ValueError(f"not a frame-feature file (magic {magic!r})")
        version, s, d_video = struct.unpack("<III", fh.read(12))
        if version != FRAME_VERSION:
            raise ValueError(f"unsupported frame-feature version {version}")
        payload = fh.read(4 * s * d_video)
        if len(payload) != 4 * s * d_video:
            raise ValueError("frame-feature file truncated")
        extra = fh.read(1)
        if extra:
            raise ValueError("frame-feature file has trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(s, d_video).copy()
