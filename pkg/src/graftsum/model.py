"""The three trainable assemblies: text seq2seq, video-text matching, and the
fused multimodal headline generator."""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .beam import BeamHypothesis, beam_search
from .encoders import MlmHead, TextEncoder, VideoEncoder, mlm_loss
from .fusion import JointModalityLayer, fuse_ablation_concat
from .nn import Linear, Module
from .objectives import clamp_temperature, generation_loss, info_nce, pool_for_matching
from .tensor import Tensor
from .transformer import DecoderStack
from .vocab import BOS_ID, EOS_ID, PAD_ID

FUSION_MODES = ("joint", "concat", "crossattn", "text-only")


class Seq2SeqTextModel(Module):
    """Denoising seq2seq with a masked-word head; the NLG pre-training model."""

    def __init__(self, vocab_size: int, dim: int, encoder_layers: int,
                 decoder_layers: int, heads: int, max_src: int, max_tgt: int,
                 rng: np.random.Generator, ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.encoder = TextEncoder(vocab_size, dim, encoder_layers, heads,
                                   max_src, rng, ff_mult, dropout)
        self.decoder = DecoderStack(vocab_size, dim, decoder_layers, heads,
                                    max_tgt, ff_mult, dropout, rng)
        self.mlm = MlmHead(dim, vocab_size, rng)

    def loss(self, batch) -> Dict[str, Tensor]:
        memory = self.encoder(batch.src, batch.src_mask)
        logits = self.decoder(batch.tgt_in, memory, batch.src_mask)
        gen = generation_loss(logits, batch.tgt_out, PAD_ID)
        if batch.mlm_positions.any():
            masked = mlm_loss(self.mlm, memory, batch.mlm_positions,
                              batch.mlm_targets)
            total = T.add(gen, masked)
        else:
            masked = Tensor(np.zeros(()))
            total = gen
        return {"total": total, "generation": gen, "mlm": masked}


class MatchingHeads(Module):
    """Everything the matching stage owns besides the video encoder."""

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int,
                 max_caption: int, contrastive_dim: int,
                 rng: np.random.Generator, ff_mult: int = 4,
                 dropout: float = 0.0, temperature_init: float = 0.07):
        super().__init__()
        self.caption_encoder = TextEncoder(vocab_size, dim, layers, heads,
                                           max_caption, rng, ff_mult, dropout)
        self.video_proj = Linear(dim, contrastive_dim, rng)
        self.caption_proj = Linear(dim, contrastive_dim, rng)
        self.temperature = Tensor(np.array(temperature_init), requires_grad=True)


class MatchingModel(Module):
    """Video-text matching with a symmetric contrastive objective."""

    def __init__(self, vocab_size: int, dim: int, video_layers: int,
                 caption_layers: int, heads: int, frame_dim: int,
                 video_tokens: int, max_caption: int, contrastive_dim: int,
                 rng: np.random.Generator, ff_mult: int = 4,
                 dropout: float = 0.0):
        super().__init__()
        self.video_encoder = VideoEncoder(frame_dim, dim, video_layers, heads,
                                          video_tokens, rng, ff_mult, dropout)
        self.heads = MatchingHeads(vocab_size, dim, caption_layers, heads,
                                   max_caption, contrastive_dim, rng,
                                   ff_mult, dropout)

    def embed_video(self, video_tokens: np.ndarray) -> Tensor:
        states = self.video_encoder(video_tokens)
        return pool_for_matching(states, None, self.heads.video_proj)

    def embed_caption(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        states = self.heads.caption_encoder(ids, mask)
        return pool_for_matching(states, mask, self.heads.caption_proj)

    def loss(self, batch) -> Tensor:
        v = self.embed_video(batch.video_tokens)
        c = self.embed_caption(batch.captions, batch.caption_mask)
        return info_nce(v, c, self.heads.temperature)

    def after_step(self) -> None:
        clamp_temperature(self.heads.temperature)


class HeadlineModel(Module):
    """Grafted multimodal generator: text encoder + video encoder + fusion
    feeding a causal decoder. fusion_mode selects the full joint layer or an
    ablated memory ('concat', 'crossattn', 'text-only')."""

    def __init__(self, vocab_size: int, dim: int, text_layers: int,
                 decoder_layers: int, video_layers: int, heads: int,
                 frame_dim: int, max_src: int, video_tokens: int, max_tgt: int,
                 rng: np.random.Generator, fusion_mode: str = "joint",
                 ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        self.fusion_mode = fusion_mode
        self.text_encoder = TextEncoder(vocab_size, dim, text_layers, heads,
                                        max_src, rng, ff_mult, dropout)
        self.video_encoder = VideoEncoder(frame_dim, dim, video_layers, heads,
                                          video_tokens, rng, ff_mult, dropout)
        self.fusion = JointModalityLayer(dim, heads, rng)
        self.decoder = DecoderStack(vocab_size, dim, decoder_layers, heads,
                                    max_tgt, ff_mult, dropout, rng)

    def memory(self, src: np.ndarray, src_mask: np.ndarray,
               video_tokens: Optional[np.ndarray]) -> Tuple[Tensor, np.ndarray]:
        """Decoder memory and its validity mask under the active fusion mode."""
        e_t = self.text_encoder(src, src_mask)
        if self.fusion_mode == "text-only":
            return e_t, np.asarray(src_mask, dtype=bool)
        if video_tokens is None:
            raise ValueError(f"fusion mode {self.fusion_mode!r} needs video tokens")
        e_v = self.video_encoder(video_tokens)
        if self.fusion_mode == "joint":
            out = self.fusion.fuse(e_t, e_v, src_mask)
            return out.fused, out.memory_mask
        if self.fusion_mode == "crossattn":
            out = self.fusion.fuse(e_t, e_v, src_mask)
            return out.g, np.asarray(src_mask, dtype=bool)
        # naive concat
        fused = fuse_ablation_concat(e_t, e_v)
        src_mask = np.asarray(src_mask, dtype=bool)
        ones = np.ones(src_mask.shape[:-1] + (e_v.shape[-2],), dtype=bool)
        return fused, np.concatenate([src_mask, ones], axis=-1)

    def loss(self, batch) -> Tensor:
        memory, mask = self.memory(batch.src, batch.src_mask, batch.video_tokens)
        logits = self.decoder(batch.tgt_in, memory, mask)
        return generation_loss(logits, batch.tgt_out, PAD_ID)

    def generate(self, src: np.ndarray, src_mask: np.ndarray,
                 video_tokens: Optional[np.ndarray], beam_size: int = 5,
                 max_len: int = 64) -> BeamHypothesis:
        """Decode one sample (unbatched inputs) with beam search."""
        with T.no_grad():
            memory, mask = self.memory(src, src_mask, video_tokens)
        mem_data = memory.data
        # prefixes inside the search never exceed max_len positions
        max_len = min(max_len, self.decoder.max_len)

        def step(prefixes: np.ndarray) -> np.ndarray:
            reps = len(prefixes)
            mem = Tensor(np.repeat(mem_data[None], reps, axis=0))
            rep_mask = np.repeat(mask[None], reps, axis=0)
            return self.decoder.decode_step(prefixes, mem, rep_mask)

        return beam_search(step, BOS_ID, EOS_ID, beam_size, max_len)
