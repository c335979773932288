from collections import Counter, defaultdict

import numpy as np
import pytest

from graftsum.synthetic import (
    SyntheticWorld, SyntheticWorldConfig, generate_synthetic,
)
from graftsum.vocab import tokenize

SMALL = dict(nlg_sizes=(40, 10, 10), matching_sizes=(25, 8, 8),
             triplet_sizes=(30, 10, 10))


def corpora_bytes(corpora):
    chunks = []
    for split, pairs in sorted(corpora.nlg.items()):
        chunks += [p.source + "\x00" + p.target for p in pairs]
    for split, pairs in sorted(corpora.matching.items()):
        chunks += [p.caption + pair_hash(p.frames) for p in pairs]
    for split, tris in sorted(corpora.triplets.items()):
        chunks += [t.transcript + t.headline + pair_hash(t.frames) for t in tris]
    return "\x01".join(chunks)


def pair_hash(frames: np.ndarray) -> str:
    return frames.tobytes().hex()[:64] + str(frames.shape)


def test_same_seed_byte_identical():
    a = generate_synthetic(SyntheticWorldConfig(seed=11), **SMALL)
    b = generate_synthetic(SyntheticWorldConfig(seed=11), **SMALL)
    assert corpora_bytes(a) == corpora_bytes(b)
    for pa, pb in zip(a.matching["train"], b.matching["train"]):
        assert pa.frames.tobytes() == pb.frames.tobytes()


def test_different_seeds_differ():
    a = generate_synthetic(SyntheticWorldConfig(seed=1), **SMALL)
    b = generate_synthetic(SyntheticWorldConfig(seed=2), **SMALL)
    assert corpora_bytes(a) != corpora_bytes(b)


def test_splits_are_disjoint_streams():
    c = generate_synthetic(SyntheticWorldConfig(seed=5), **SMALL)
    assert c.nlg["train"][0].source != c.nlg["val"][0].source
    assert c.triplets["train"][0].headline != c.triplets["val"][0].headline \
        or c.triplets["train"][0].transcript != c.triplets["val"][0].transcript


def test_headline_structure_and_evidence_channels():
    cfg = SyntheticWorldConfig(seed=7)
    world = SyntheticWorld(cfg)
    for i in range(60):
        tri = world.triplet("train", i)
        head = tokenize(tri.headline)
        assert len(head) == 4
        topic_a, topic_b, fact, sal = head
        assert topic_a.startswith("topic") and topic_a.endswith("a")
        assert topic_b.startswith("topic") and topic_b.endswith("b")
        assert fact.startswith("fact")
        assert sal.startswith("sal")
        transcript = set(tokenize(tri.transcript))
        # text channel: topic words and the fact token are in the transcript
        assert {topic_a, topic_b, fact} <= transcript
        # video channel: the salience token never leaks into the transcript
        assert sal not in transcript


def test_echo_mode_puts_salience_in_transcript():
    cfg = SyntheticWorldConfig(seed=7, echo=True)
    world = SyntheticWorld(cfg)
    for i in range(20):
        tri = world.triplet("train", i)
        sal = tokenize(tri.headline)[3]
        assert sal in set(tokenize(tri.transcript))


def test_transcript_length_bounds():
    cfg = SyntheticWorldConfig(seed=9)
    world = SyntheticWorld(cfg)
    lengths = set()
    for i in range(80):
        n = len(tokenize(world.nlg_pair("train", i).source))
        assert cfg.min_transcript <= n <= cfg.max_transcript
        lengths.add(n)
    assert len(lengths) > 3


def test_nlg_pairs_are_identity():
    world = SyntheticWorld(SyntheticWorldConfig(seed=2))
    for i in range(20):
        p = world.nlg_pair("train", i)
        assert p.source == p.target


def test_frames_shape_and_dtype():
    cfg = SyntheticWorldConfig(seed=4)
    world = SyntheticWorld(cfg)
    sizes = set()
    for i in range(30):
        tri = world.triplet("train", i)
        s, d = tri.frames.shape
        assert d == cfg.frame_dim
        assert cfg.min_frames <= s <= cfg.max_frames
        assert tri.frames.dtype == np.float32
        assert np.isfinite(tri.frames).all()
        sizes.add(s)
    assert len(sizes) > 3


def test_first_segment_motif_matches_salience():
    """The salience token is readable from the frames: averaging the first
    segment beats the per-frame noise and lands on the motif the headline
    names."""
    cfg = SyntheticWorldConfig(seed=13)
    world = SyntheticWorld(cfg)
    for i in range(40):
        tri = world.triplet("train", i)
        sal = int(tokenize(tri.headline)[3][len("sal"):])
        topic_a = tokenize(tri.headline)[0]
        topic = int(topic_a[len("topic"):-1])
        s = tri.frames.shape[0]
        first_end = np.linspace(0, s, cfg.segments_per_video + 1).astype(int)[1]
        sims = world.motifs[topic] @ tri.frames[:first_end].mean(axis=0)
        assert int(np.argmax(sims)) == sal


def test_caption_names_leading_motifs_in_order():
    cfg = SyntheticWorldConfig(seed=21)
    world = SyntheticWorld(cfg)
    for i in range(30):
        pair = world.matching_pair("train", i)
        toks = tokenize(pair.caption)
        assert len(toks) == 2 + cfg.caption_motifs
        topic = int(toks[0][len("topic"):-1])
        named = [int(t[len("sal"):]) for t in toks[2:]]
        # segment boundaries: each named segment averages out to its motif
        s = pair.frames.shape[0]
        bounds = np.linspace(0, s, cfg.segments_per_video + 1).astype(int)
        for seg, motif in enumerate(named):
            row = pair.frames[bounds[seg]:bounds[seg + 1]].mean(axis=0)
            assert int(np.argmax(world.motifs[topic] @ row)) == motif
        assert len(set(named)) == len(named)  # motifs within a video distinct


def test_text_only_oracle_cannot_reach_perfect_recall():
    """Group train triplets by everything a transcript reveals (topic, fact):
    the best deterministic text->headline map still misses salience often."""
    cfg = SyntheticWorldConfig(seed=17, topics=2, fact_count=2,
                               motifs_per_topic=4, segments_per_video=3,
                               caption_motifs=2)
    world = SyntheticWorld(cfg)
    groups = defaultdict(Counter)
    total = 400
    for i in range(total):
        tri = world.triplet("train", i)
        head = tokenize(tri.headline)
        groups[(head[0], head[2])][head[3]] += 1
    assert len(groups) == cfg.topics * cfg.fact_count
    correct = 0
    for counts in groups.values():
        assert len(counts) > 1  # several saliences per text-identical group
        correct += max(counts.values())
    best_accuracy = correct / total
    assert best_accuracy < 0.6  # uniform over 4 motifs would give ~0.25


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(topics=0))
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(segments_per_video=20))
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(fact_count=0))
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(min_frames=2, segments_per_video=4))
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(max_frames=5, min_frames=12))
    with pytest.raises(ValueError):
        SyntheticWorld(SyntheticWorldConfig(caption_motifs=9))


def test_all_words_covers_generated_text():
    cfg = SyntheticWorldConfig(seed=23)
    world = SyntheticWorld(cfg)
    allowed = set(world.all_words())
    for i in range(25):
        tri = world.triplet("train", i)
        assert set(tokenize(tri.transcript)) <= allowed
        assert set(tokenize(tri.headline)) <= allowed
        pair = world.matching_pair("train", i)
        assert set(tokenize(pair.caption)) <= allowed
