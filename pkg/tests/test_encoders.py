"""Frame sampling, modality encoders, masked-word loss, feature file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftsum import tensor as T
from graftsum.encoders import (
    AllPaddedError,
    FrameSampler,
    MlmHead,
    TextEncoder,
    VideoEncoder,
    encode_video,
    mlm_loss,
    read_frame_features,
    sample_frames,
    write_frame_features,
)
from graftsum.tensor import Tensor


class TestFrameSampler:
    def test_eval_strata_centers(self):
        idx = sample_frames(FrameSampler(4, "eval"), s=8)
        assert idx.tolist() == [1, 3, 5, 7]

    def test_eval_identity_when_counts_match(self):
        for l in (1, 3, 16):
            idx = sample_frames(FrameSampler(l, "eval"), s=l)
            assert idx.tolist() == list(range(1, l + 1))

    def test_eval_repeats_when_video_short(self):
        idx = sample_frames(FrameSampler(4, "eval"), s=2)
        assert idx.tolist() == [1, 1, 2, 2]

    def test_eval_is_pure(self):
        a = sample_frames(FrameSampler(16, "eval", seed=1), s=23)
        b = sample_frames(FrameSampler(16, "eval", seed=99), s=23)
        assert np.array_equal(a, b)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
    def test_train_indices_stay_in_strata(self, l, s, seed):
        sampler = FrameSampler(l, "train", seed=seed)
        idx = sampler.indices(s, sample_id=seed % 17, pass_index=seed % 3)
        assert len(idx) == l
        assert np.all(idx >= 1) and np.all(idx <= s)
        assert np.all(np.diff(idx) >= 0)
        i = np.arange(1, l + 1)
        lo = (i - 1) * s // l + 1
        hi = -(-i * s // l)
        assert np.all(idx >= lo) and np.all(idx <= hi)

    def test_train_reproducible_and_keyed(self):
        sampler = FrameSampler(8, "train", seed=7)
        a = sampler.indices(30, sample_id=5, pass_index=2)
        b = sampler.indices(30, sample_id=5, pass_index=2)
        c = sampler.indices(30, sample_id=5, pass_index=3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_train_varies_across_thousand_seeds(self):
        seen = {
            tuple(FrameSampler(4, "train", seed=s).indices(8))
            for s in range(1000)
        }
        assert len(seen) > 10

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            FrameSampler(4, "online")


class TestVideoEncoder:
    def make(self, feature_dim=6, dim=8, max_tokens=16, seed=40):
        return VideoEncoder(feature_dim, dim, layers=1, heads=2,
                            max_tokens=max_tokens,
                            rng=np.random.default_rng(seed)).eval()

    def test_output_shape(self):
        enc = self.make()
        frames = np.random.default_rng(41).normal(size=(20, 6))
        out = encode_video(enc, frames, FrameSampler(8, "eval"))
        assert out.shape == (8, 8)

    @pytest.mark.slow
    def test_paper_scale_shape(self):
        enc = VideoEncoder(64, 512, layers=2, heads=8, max_tokens=32,
                           rng=np.random.default_rng(42)).eval()
        frames = np.random.default_rng(43).normal(size=(50, 64))
        out = encode_video(enc, frames, FrameSampler(32, "eval"))
        assert out.shape == (32, 512)

    def test_eval_bit_identical(self):
        enc = self.make()
        frames = np.random.default_rng(44).normal(size=(12, 6))
        a = encode_video(enc, frames, FrameSampler(4, "eval")).data
        b = encode_video(enc, frames, FrameSampler(4, "eval")).data
        assert np.array_equal(a, b)

    def test_zero_features_stay_finite(self):
        enc = self.make()
        out = encode_video(enc, np.zeros((10, 6)), FrameSampler(4, "eval"))
        assert np.all(np.isfinite(out.data))

    def test_unselected_frames_do_not_matter(self):
        enc = self.make()
        rng = np.random.default_rng(45)
        frames = rng.normal(size=(8, 6))
        sampler = FrameSampler(4, "eval")
        picked = sample_frames(sampler, 8)  # [1,3,5,7]
        out_a = encode_video(enc, frames, sampler).data
        poked = frames.copy()
        untouched = sorted(set(range(1, 9)) - set(picked.tolist()))
        for j in untouched:
            poked[j - 1] += 99.0
        out_b = encode_video(enc, poked, sampler).data
        assert np.array_equal(out_a, out_b)

    def test_feature_dim_mismatch_rejected(self):
        enc = self.make(feature_dim=6)
        with pytest.raises(T.ShapeError):
            encode_video(enc, np.zeros((5, 7)), FrameSampler(2, "eval"))

    def test_nonfinite_features_rejected(self):
        enc = self.make()
        bad = np.zeros((5, 6))
        bad[2, 3] = np.nan
        with pytest.raises(ValueError):
            encode_video(enc, bad, FrameSampler(2, "eval"))


class TestTextEncoder:
    def make(self, vocab=30, dim=8, max_len=16, seed=50):
        return TextEncoder(vocab, dim, layers=2, heads=2, max_len=max_len,
                           rng=np.random.default_rng(seed)).eval()

    def test_output_shape(self):
        enc = self.make()
        ids = np.array([[1, 5, 9, 0], [1, 7, 0, 0]])
        mask = ids != 0
        out = enc(ids, mask)
        assert out.shape == (2, 4, 8)

    @pytest.mark.slow
    def test_paper_scale_shape(self):
        enc = TextEncoder(2000, 512, layers=2, heads=8, max_len=128,
                          rng=np.random.default_rng(51)).eval()
        ids = np.random.default_rng(52).integers(5, 2000, size=128)
        out = enc(ids, np.ones(128, dtype=bool))
        assert out.shape == (128, 512)

    def test_all_pad_rejected(self):
        enc = self.make()
        with pytest.raises(AllPaddedError):
            enc(np.zeros(4, dtype=int), np.zeros(4, dtype=bool))

    def test_position_changes_representation(self):
        # same token id in different slots must encode differently
        enc = self.make()
        ids = np.array([7, 7, 7])
        out = enc(ids, np.ones(3, dtype=bool)).data
        assert not np.allclose(out[0], out[1])


class TestMlmLoss:
    def test_untrained_loss_near_log_vocab(self):
        vocab = 100
        rng = np.random.default_rng(60)
        head = MlmHead(8, vocab, rng)
        states = Tensor(rng.normal(size=(6, 8)) * 0.1)
        masked = np.array([True, False, True, True, False, False])
        ids = rng.integers(0, vocab, size=6)
        loss = mlm_loss(head, states, masked, ids)
        assert abs(loss.data - np.log(vocab)) < 0.5

    def test_perfect_logits_drive_loss_to_zero(self):
        vocab = 10
        head = MlmHead(vocab, vocab, np.random.default_rng(61))
        head.proj.weight.data = np.eye(vocab, dtype=head.proj.weight.dtype.type) * 50.0
        head.proj.bias.data[:] = 0.0
        ids = np.array([3, 7, 1])
        states = Tensor(np.eye(vocab)[ids])
        loss = mlm_loss(head, states, np.ones(3, dtype=bool), ids)
        assert loss.data < 1e-4

    def test_no_masked_positions_rejected(self):
        head = MlmHead(8, 20, np.random.default_rng(62))
        states = Tensor(np.zeros((4, 8)))
        with pytest.raises(ValueError):
            mlm_loss(head, states, np.zeros(4, dtype=bool), np.zeros(4, dtype=int))

    def test_unmasked_positions_do_not_contribute(self):
        vocab = 20
        rng = np.random.default_rng(63)
        head = MlmHead(8, vocab, rng)
        states = rng.normal(size=(5, 8))
        masked = np.array([True, False, True, False, False])
        ids = rng.integers(0, vocab, size=5)
        base = mlm_loss(head, Tensor(states), masked, ids).data
        poked = states.copy()
        poked[1] += 10.0
        poked[4] -= 3.0
        alt = mlm_loss(head, Tensor(poked), masked, ids).data
        assert np.allclose(base, alt)

    def test_gradient_reaches_only_masked_rows(self):
        vocab = 12
        rng = np.random.default_rng(64)
        head = MlmHead(6, vocab, rng)
        states = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        masked = np.array([False, True, False, True])
        ids = rng.integers(0, vocab, size=4)
        mlm_loss(head, states, masked, ids).backward()
        grad_norms = np.abs(states.grad).sum(axis=-1)
        assert grad_norms[0] == 0.0 and grad_norms[2] == 0.0
        assert grad_norms[1] > 0.0 and grad_norms[3] > 0.0


class TestFrameFeatureFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        feats = np.random.default_rng(70).normal(size=(9, 5)).astype(np.float32)
        path = tmp_path / "clip.frames"
        write_frame_features(path, feats)
        back = read_frame_features(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, feats)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "zz.frames"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_frame_features(path)

    def test_truncation_detected(self, tmp_path):
        feats = np.ones((4, 3), dtype=np.float32)
        path = tmp_path / "cut.frames"
        write_frame_features(path, feats)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(ValueError, match="truncated"):
            read_frame_features(path)

    def test_trailing_garbage_detected(self, tmp_path):
        feats = np.ones((2, 2), dtype=np.float32)
        path = tmp_path / "pad.frames"
        write_frame_features(path, feats)
        path.write_bytes(path.read_bytes() + b"!")
        with pytest.raises(ValueError, match="trailing"):
            read_frame_features(path)
