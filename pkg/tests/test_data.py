import json
import logging

import numpy as np
import pytest

from graftsum.data import (
    DataError, apply_length_policy, corrupt_ids, epoch_indices, ingest_jsonl,
    make_matching_batch, make_nlg_batch, make_triplet_batch, preprocess_nlg,
    preprocess_triplets, sample_video_tokens, write_corpora,
)
from graftsum.encoders import FrameSampler, write_frame_features
from graftsum.synthetic import (
    NlgPair, SyntheticWorldConfig, Triplet, generate_synthetic,
)
from graftsum.vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, build_vocab


def write_lines(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- ingestion

def test_ingest_nlg_well_formed(tmp_path):
    p = tmp_path / "x.jsonl"
    write_lines(p, [{"source": f"s {i}", "target": f"t {i}"} for i in range(3)])
    samples = ingest_jsonl(p, "nlg")
    assert len(samples) == 3
    assert samples[1].source == "s 1"
    assert samples[2].target == "t 2"


def test_ingest_missing_field_names_line(tmp_path):
    p = tmp_path / "x.jsonl"
    write_lines(p, [{"source": "a", "target": "b"}, {"source": "c"}])
    with pytest.raises(DataError, match="line 2.*target"):
        ingest_jsonl(p, "nlg")


def test_ingest_bad_json_names_line(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"source": "a", "target": "b"}\nnot json\n')
    with pytest.raises(DataError, match="line 2"):
        ingest_jsonl(p, "nlg")


def test_ingest_non_string_field(tmp_path):
    p = tmp_path / "x.jsonl"
    write_lines(p, [{"source": 7, "target": "b"}])
    with pytest.raises(DataError, match="line 1.*source"):
        ingest_jsonl(p, "nlg")


def test_ingest_nan_features_names_line_and_field(tmp_path):
    p = tmp_path / "m.jsonl"
    good = {"caption": "ok", "video_features": [[0.1, 0.2], [0.3, 0.4]]}
    bad = {"caption": "bad", "video_features": [[0.1, float("nan")]]}
    with open(p, "w") as fh:
        fh.write(json.dumps(good) + "\n")
        fh.write(json.dumps(bad).replace("NaN", "NaN") + "\n")
    with pytest.raises(DataError, match="line 2.*video_features"):
        ingest_jsonl(p, "matching")


def test_ingest_empty_file_warns_and_returns_empty(tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING, logger="graftsum.data"):
        samples = ingest_jsonl(p, "matching")
    assert samples == []
    assert any("empty" in rec.message for rec in caplog.records)


def test_ingest_video_path_variant(tmp_path):
    frames = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_frame_features(tmp_path / "v.frames", frames)
    p = tmp_path / "t.jsonl"
    write_lines(p, [{"transcript": "a b", "headline": "h", "video": "v.frames"}])
    (tri,) = ingest_jsonl(p, "triplet")
    assert np.array_equal(tri.frames, frames)


def test_ingest_missing_video_file(tmp_path):
    p = tmp_path / "t.jsonl"
    write_lines(p, [{"transcript": "a", "headline": "h", "video": "gone.frames"}])
    with pytest.raises(DataError, match="line 1.*gone.frames"):
        ingest_jsonl(p, "triplet")


def test_ingest_inline_features_must_be_matrix(tmp_path):
    p = tmp_path / "m.jsonl"
    write_lines(p, [{"caption": "c", "video_features": [1.0, 2.0]}])
    with pytest.raises(DataError, match="line 1"):
        ingest_jsonl(p, "matching")


def test_write_corpora_round_trips_through_ingest(tmp_path):
    corpora = generate_synthetic(SyntheticWorldConfig(seed=31),
                                 nlg_sizes=(6, 3, 3), matching_sizes=(5, 2, 2),
                                 triplet_sizes=(4, 2, 2))
    written = write_corpora(corpora, tmp_path)
    assert set(written) == {f"{kind}_{split}"
                            for kind in ("nlg", "matching", "triplet")
                            for split in ("train", "val", "test")}
    for split in ("train", "val", "test"):
        nlg = ingest_jsonl(written[f"nlg_{split}"], "nlg")
        assert [(p.source, p.target) for p in nlg] == \
            [(p.source, p.target) for p in corpora.nlg[split]]
        match = ingest_jsonl(written[f"matching_{split}"], "matching")
        for got, want in zip(match, corpora.matching[split]):
            assert got.caption == want.caption
            assert np.array_equal(got.frames, want.frames)  # float32 bit-exact
        tris = ingest_jsonl(written[f"triplet_{split}"], "triplet")
        for got, want in zip(tris, corpora.triplets[split]):
            assert got.headline == want.headline
            assert np.array_equal(got.frames, want.frames)


# ------------------------------------------------------------ length policy

def test_length_policy_passthrough_and_reject():
    assert apply_length_policy(["a", "b"], 4, "reject") == [["a", "b"]]
    with pytest.raises(DataError, match="5 tokens"):
        apply_length_policy(list("abcde"), 4, "reject")


def test_length_policy_split_covers_everything_in_order():
    tokens = [f"t{i}" for i in range(11)]
    windows = apply_length_policy(tokens, 4, "split")
    assert all(len(w) <= 4 for w in windows)
    assert [t for w in windows for t in w] == tokens


def test_length_policy_unknown_name():
    with pytest.raises(ValueError):
        apply_length_policy(["a"], 4, "truncate")


def test_preprocess_nlg_splits_identity_pairs():
    long = " ".join(f"w{i}" for i in range(10))
    out = preprocess_nlg([NlgPair(long, long), NlgPair("a b", "a b")],
                         max_src=4, policy="split")
    assert len(out) == 4  # 3 windows + the short pair
    assert all(p.source == p.target for p in out)
    rebuilt = " ".join(p.source for p in out[:3])
    assert rebuilt == long


def test_preprocess_nlg_rejects_non_identity_split():
    long = " ".join(f"w{i}" for i in range(10))
    with pytest.raises(DataError):
        preprocess_nlg([NlgPair(long, "different target")], max_src=4,
                       policy="split")


def test_preprocess_triplets_windows_keep_video_and_headline():
    frames = np.zeros((5, 3), dtype=np.float32)
    long = " ".join(f"w{i}" for i in range(9))
    out = preprocess_triplets([Triplet(frames, long, "h line")], max_src=4,
                              policy="split")
    assert len(out) == 3
    for tri in out:
        assert tri.headline == "h line"
        assert tri.frames is frames


def test_preprocess_reject_raises_on_overlong():
    long = " ".join(f"w{i}" for i in range(9))
    with pytest.raises(DataError):
        preprocess_nlg([NlgPair(long, long)], max_src=4, policy="reject")


# ---------------------------------------------------------------- corruption

def test_corruption_reproducible_per_key():
    ids = list(range(5, 45))
    from graftsum.data import _corruption_rng
    a, fa = corrupt_ids(ids, 100, _corruption_rng(3, 7, 1))
    b, fb = corrupt_ids(ids, 100, _corruption_rng(3, 7, 1))
    c, fc = corrupt_ids(ids, 100, _corruption_rng(3, 7, 2))
    assert a == b and np.array_equal(fa, fb)
    assert a != c or not np.array_equal(fa, fc)


def test_corruption_always_touches_at_least_one():
    from graftsum.data import _corruption_rng
    for sid in range(50):
        _, flags = corrupt_ids([5, 6], 100, _corruption_rng(0, sid, 0), rate=0.01)
        assert flags.any()


def test_corruption_rate_and_mix():
    rng = np.random.default_rng(0)
    ids = list(range(5, 105))
    masked = replaced = kept = chosen = 0
    for _ in range(300):
        noisy, flags = corrupt_ids(ids, 500, rng)
        chosen += int(flags.sum())
        for i in np.flatnonzero(flags):
            if noisy[i] == MASK_ID:
                masked += 1
            elif noisy[i] == ids[i]:
                kept += 1
            else:
                replaced += 1
                assert noisy[i] >= 5  # reserved ids never injected
    assert 0.12 < chosen / (300 * len(ids)) < 0.18
    assert 0.75 < masked / chosen < 0.85
    assert 0.06 < replaced / chosen < 0.14
    assert 0.06 < kept / chosen < 0.14


def test_corruption_leaves_unchosen_positions_alone():
    from graftsum.data import _corruption_rng
    ids = list(range(5, 35))
    noisy, flags = corrupt_ids(ids, 100, _corruption_rng(1, 2, 3))
    for i, flag in enumerate(flags):
        if not flag:
            assert noisy[i] == ids[i]


# ------------------------------------------------------------------ batching

@pytest.fixture(scope="module")
def toy_setup():
    corpora = generate_synthetic(SyntheticWorldConfig(seed=41),
                                 nlg_sizes=(12, 0, 0), matching_sizes=(8, 0, 0),
                                 triplet_sizes=(8, 0, 0))
    texts = [p.source for p in corpora.nlg["train"]]
    texts += [p.caption for p in corpora.matching["train"]]
    texts += [t.transcript + " " + t.headline for t in corpora.triplets["train"]]
    vocab = build_vocab(texts)
    return corpora, vocab


def test_nlg_batch_shapes_and_special_tokens(toy_setup):
    corpora, vocab = toy_setup
    pairs = corpora.nlg["train"]
    batch = make_nlg_batch(vocab, pairs, [0, 1, 2], max_src=64, max_tgt=64,
                           seed=9, pass_index=0)
    assert batch.src.shape == batch.src_mask.shape == batch.mlm_positions.shape
    assert batch.tgt_in.shape == batch.tgt_out.shape
    assert (batch.tgt_in[:, 0] == BOS_ID).all()
    for row_in, row_out in zip(batch.tgt_in, batch.tgt_out):
        n = int((row_out != PAD_ID).sum())
        assert row_out[n - 1] == EOS_ID
        assert (row_in[1:n] == row_out[: n - 1]).all()
    assert batch.mlm_positions.any()
    # masked targets hold the clean ids wherever a position was corrupted
    clean = make_nlg_batch(vocab, pairs, [0, 1, 2], max_src=64, max_tgt=64,
                           seed=9, pass_index=0, corrupt=False)
    pos = batch.mlm_positions
    assert (batch.mlm_targets[pos] == clean.src[pos]).all()
    assert not clean.mlm_positions.any()


def test_nlg_batch_corruption_keyed_by_pass(toy_setup):
    corpora, vocab = toy_setup
    pairs = corpora.nlg["train"]
    a = make_nlg_batch(vocab, pairs, [0, 1], 64, 64, seed=9, pass_index=0)
    b = make_nlg_batch(vocab, pairs, [0, 1], 64, 64, seed=9, pass_index=0)
    c = make_nlg_batch(vocab, pairs, [0, 1], 64, 64, seed=9, pass_index=5)
    assert np.array_equal(a.src, b.src)
    assert not np.array_equal(a.src, c.src)


def test_nlg_batch_rejects_overlong_source(toy_setup):
    _, vocab = toy_setup
    long = " ".join(f"w{i}" for i in range(30))
    with pytest.raises(DataError, match="over the 8-token limit"):
        make_nlg_batch(vocab, [NlgPair(long, long)], [0], max_src=8,
                       max_tgt=64, seed=0, pass_index=0)


def test_matching_batch_samples_requested_rows(toy_setup):
    corpora, vocab = toy_setup
    pairs = corpora.matching["train"]
    sampler = FrameSampler(token_count=4, mode="eval")
    batch = make_matching_batch(vocab, pairs, [0, 1, 2], sampler, pass_index=0)
    assert batch.video_tokens.shape[:2] == (3, 4)
    idx = sampler.indices(pairs[1].frames.shape[0])
    assert np.array_equal(batch.video_tokens[1], pairs[1].frames[idx - 1])
    assert batch.captions.shape == batch.caption_mask.shape


def test_triplet_batch_contents(toy_setup):
    corpora, vocab = toy_setup
    tris = corpora.triplets["train"]
    sampler = FrameSampler(token_count=4, mode="eval")
    batch = make_triplet_batch(vocab, tris, [0, 1], sampler, pass_index=0,
                               max_src=64, max_tgt=64)
    assert batch.src.shape[0] == 2
    assert batch.video_tokens.shape[:2] == (2, 4)
    assert batch.references[0] == tris[0].headline.split()
    assert (batch.tgt_in[:, 0] == BOS_ID).all()


def test_sample_video_tokens_is_stochastic_only_in_train_mode():
    frames = np.arange(60, dtype=np.float32).reshape(20, 3)
    ev = FrameSampler(token_count=5, mode="eval")
    assert np.array_equal(sample_video_tokens(frames, ev, 0, 0),
                          sample_video_tokens(frames, ev, 0, 1))
    tr = FrameSampler(token_count=5, mode="train", seed=3)
    draws = {sample_video_tokens(frames, tr, 0, p).tobytes() for p in range(8)}
    assert len(draws) > 1


def test_epoch_indices_cover_everything_once():
    rng = np.random.default_rng(0)
    batches = list(epoch_indices(23, 5, rng))
    seen = np.concatenate(batches)
    # tail of 3 >= 2 is kept
    assert sorted(seen.tolist()) == list(range(23))
    assert [len(b) for b in batches] == [5, 5, 5, 5, 3]


def test_epoch_indices_drop_single_tail():
    rng = np.random.default_rng(0)
    batches = list(epoch_indices(11, 5, rng))
    assert [len(b) for b in batches] == [5, 5]
    rng2 = np.random.default_rng(1)
    assert [len(b) for b in epoch_indices(2, 5, rng2)] == [2]
