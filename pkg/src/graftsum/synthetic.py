"""Synthetic multimodal corpus with controlled evidence channels.

Every sample lives in a topic world. The transcript carries the topic words
and one fact token (text-only evidence) among distractors; the video is a
sequence of motif segments whose ORDER determines the salience token
(video-only evidence). The reference headline needs both channels:

    headline = topic_word_a topic_word_b fact_token salience_token

so a text-only model hits an analytic ceiling on the salience slot, and the
matching captions describe motif order, which is what the grafted video
encoder transfers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

# split codes keep per-sample seeds disjoint across corpora
_SPLIT_CODE = {
    ("nlg", "train"): 10, ("nlg", "val"): 11, ("nlg", "test"): 12,
    ("matching", "train"): 20, ("matching", "val"): 21, ("matching", "test"): 22,
    ("triplet", "train"): 30, ("triplet", "val"): 31, ("triplet", "test"): 32,
}


@dataclass
class SyntheticWorldConfig:
    topics: int = 12
    motifs_per_topic: int = 8
    distractor_count: int = 1800
    fact_count: int = 50
    frame_dim: int = 64
    min_frames: int = 24
    max_frames: int = 48
    segments_per_video: int = 4
    caption_motifs: int = 3       # how many leading segment motifs captions name
    min_transcript: int = 16
    max_transcript: int = 28
    noise_scale: float = 0.3
    echo: bool = False            # echo mode: salience token also in transcript
    seed: int = 0

    def validate(self) -> None:
        if self.topics < 1 or self.motifs_per_topic < 2:
            raise ValueError("need >= 1 topic and >= 2 motifs per topic")
        if self.segments_per_video > self.motifs_per_topic:
            raise ValueError("more segments than motifs to draw from")
        if self.caption_motifs > self.segments_per_video:
            raise ValueError("captions cannot name more motifs than segments")
        if self.distractor_count < 1 or self.fact_count < 1:
            raise ValueError("empty distractor or fact pool")
        if self.min_frames < self.segments_per_video:
            raise ValueError("too few frames for the segment count")
        if self.max_frames < self.min_frames or self.max_transcript < self.min_transcript:
            raise ValueError("degenerate range bounds")
        if self.min_transcript < 4:
            raise ValueError("transcript too short for topic words and fact")


@dataclass
class NlgPair:
    source: str
    target: str


@dataclass
class MatchingPair:
    frames: np.ndarray  # (s, frame_dim) float32
    caption: str


@dataclass
class Triplet:
    frames: np.ndarray
    transcript: str
    headline: str


@dataclass
class SyntheticCorpora:
    config: SyntheticWorldConfig
    nlg: Dict[str, List[NlgPair]] = field(default_factory=dict)
    matching: Dict[str, List[MatchingPair]] = field(default_factory=dict)
    triplets: Dict[str, List[Triplet]] = field(default_factory=dict)


class SyntheticWorld:
    """Pools and motif geometry, all derived from the config seed."""

    def __init__(self, config: SyntheticWorldConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        raw = rng.normal(size=(config.topics, config.motifs_per_topic,
                               config.frame_dim))
        self.motifs = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
        self.topic_words = [
            (f"topic{k}a", f"topic{k}b") for k in range(config.topics)
        ]
        self.fact_words = [f"fact{j}" for j in range(config.fact_count)]
        self.salience_words = [f"sal{v}" for v in range(config.motifs_per_topic)]
        self.distractors = [f"word{i}" for i in range(config.distractor_count)]

    def all_words(self) -> List[str]:
        words: List[str] = []
        for a, b in self.topic_words:
            words += [a, b]
        return words + self.fact_words + self.salience_words + self.distractors

    def _sample_rng(self, kind: str, split: str, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(
            [self.config.seed, _SPLIT_CODE[(kind, split)], index]
        ))

    def _draw_scene(self, rng: np.random.Generator):
        cfg = self.config
        topic = int(rng.integers(cfg.topics))
        order = rng.permutation(cfg.motifs_per_topic)[: cfg.segments_per_video]
        fact = int(rng.integers(cfg.fact_count))
        return topic, order, fact

    def _render_frames(self, rng, topic: int, order: np.ndarray) -> np.ndarray:
        cfg = self.config
        s = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        bounds = np.linspace(0, s, len(order) + 1).astype(int)
        rows = []
        for seg, motif in enumerate(order):
            count = bounds[seg + 1] - bounds[seg]
            base = self.motifs[topic, motif]
            noise = rng.normal(scale=cfg.noise_scale, size=(count, cfg.frame_dim))
            rows.append(base[None, :] + noise)
        return np.concatenate(rows).astype(np.float32)

    def _render_transcript(self, rng, topic: int, fact: int,
                           salience: int) -> str:
        cfg = self.config
        words = list(self.topic_words[topic]) + [self.fact_words[fact]]
        if cfg.echo:
            words.append(self.salience_words[salience])
        length = int(rng.integers(cfg.min_transcript, cfg.max_transcript + 1))
        fill = rng.integers(0, cfg.distractor_count, size=max(length - len(words), 0))
        words += [self.distractors[i] for i in fill]
        rng.shuffle(words)
        return " ".join(words)

    def _headline(self, topic: int, fact: int, salience: int) -> str:
        a, b = self.topic_words[topic]
        return " ".join([a, b, self.fact_words[fact], self.salience_words[salience]])

    def _caption(self, topic: int, order: np.ndarray) -> str:
        a, b = self.topic_words[topic]
        named = [self.salience_words[m] for m in order[: self.config.caption_motifs]]
        return " ".join([a, b] + named)

    def nlg_pair(self, split: str, index: int) -> NlgPair:
        rng = self._sample_rng("nlg", split, index)
        topic, order, fact = self._draw_scene(rng)
        transcript = self._render_transcript(rng, topic, fact, int(order[0]))
        return NlgPair(source=transcript, target=transcript)

    def matching_pair(self, split: str, index: int) -> MatchingPair:
        rng = self._sample_rng("matching", split, index)
        topic, order, _ = self._draw_scene(rng)
        frames = self._render_frames(rng, topic, order)
        return MatchingPair(frames=frames, caption=self._caption(topic, order))

    def triplet(self, split: str, index: int) -> Triplet:
        rng = self._sample_rng("triplet", split, index)
        topic, order, fact = self._draw_scene(rng)
        salience = int(order[0])
        frames = self._render_frames(rng, topic, order)
        return Triplet(
            frames=frames,
            transcript=self._render_transcript(rng, topic, fact, salience),
            headline=self._headline(topic, fact, salience),
        )


def generate_synthetic(
    config: SyntheticWorldConfig,
    nlg_sizes: Tuple[int, int, int] = (20_000, 200, 200),
    matching_sizes: Tuple[int, int, int] = (10_000, 200, 200),
    triplet_sizes: Tuple[int, int, int] = (2_000, 200, 200),
) -> SyntheticCorpora:
    """Three corpora in train/val/test splits, deterministic per seed."""
    world = SyntheticWorld(config)
    out = SyntheticCorpora(config=config)
    splits = ("train", "val", "test")
    for split, n in zip(splits, nlg_sizes):
        out.nlg[split] = [world.nlg_pair(split, i) for i in range(n)]
    for split, n in zip(splits, matching_sizes):
        out.matching[split] = [world.matching_pair(split, i) for i in range(n)]
    for split, n in zip(splits, triplet_sizes):
        out.triplets[split] = [world.triplet(split, i) for i in range(n)]
    return out
