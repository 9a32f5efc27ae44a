"""Encoder modes: subsampling, causality, streaming caches, history banks."""

import numpy as np
import pytest

from fnt.encoder import (
    EncoderConfig,
    FeatureSeq,
    SpeechEncoder,
    build_history_bank,
    downsample_history,
    downsampled_length,
)
from fnt.rng import Rng
from fnt.tensor import ShapeError, Tensor, no_grad, tsum


def small_config(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ffn=24, d_feat=8, chunk_frames=2, left_chunks=None)
    base.update(kw)
    return EncoderConfig(**base)


def make_encoder(cfg, seed=123):
    return SpeechEncoder(cfg, Rng(seed).child("enc"))


def features(seed, n, d=8):
    return FeatureSeq(Tensor(Rng(seed).normal(size=(n, d))))


class TestSubsample:
    def test_rate_four(self):
        enc = make_encoder(small_config())
        assert enc.subsample(features(1, 16)).shape == (4, 16)

    def test_remainder_dropped(self):
        enc = make_encoder(small_config())
        assert enc.subsample(features(2, 17)).shape == (4, 16)

    def test_zero_frames_give_bias(self):
        enc = make_encoder(small_config())
        enc.sub_proj.bias.data[:] = 0.5
        out = enc.subsample(FeatureSeq(Tensor(np.zeros((4, 8)))))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_too_short_rejected(self):
        enc = make_encoder(small_config())
        with pytest.raises(ShapeError):
            enc.subsample(FeatureSeq(Tensor(np.zeros((3, 8)))))


class TestOffline:
    def test_output_length(self):
        enc = make_encoder(small_config())
        for t_in in (8, 13, 24):
            assert len(enc.encode_offline(features(3, t_in))) == t_in // 4

    def test_causality_under_perturbation(self):
        enc = make_encoder(small_config())
        feat = features(4, 20)
        base = enc.encode_offline(feat).hidden.data.copy()
        for frame in (8, 12, 19):
            bumped = feat.frames.data.copy()
            bumped[frame] += 1.0
            out = enc.encode_offline(FeatureSeq(Tensor(bumped))).hidden.data
            unaffected = frame // 4
            np.testing.assert_allclose(out[:unaffected], base[:unaffected], atol=1e-10)
            assert np.abs(out[unaffected] - base[unaffected]).max() > 0

    def test_bit_identical_repeat(self):
        feat = features(5, 16)
        a = make_encoder(small_config(), 9).encode_offline(feat).hidden.data
        b = make_encoder(small_config(), 9).encode_offline(feat).hidden.data
        np.testing.assert_array_equal(a, b)

    def test_grad_mask_all_true(self):
        enc = make_encoder(small_config())
        assert enc.encode_offline(features(6, 16)).grad_mask.all()


class TestLongSpeech:
    def test_empty_history_identity(self):
        enc = make_encoder(small_config())
        feat = features(7, 16)
        a = enc.encode_long_speech([], feat)
        b = enc.encode_offline(feat)
        np.testing.assert_array_equal(a.hidden.data, b.hidden.data)

    def test_history_changes_current_outputs(self):
        enc = make_encoder(small_config())
        feat = features(8, 16)
        plain = enc.encode_offline(feat)
        with_hist = enc.encode_long_speech([features(9, 12)], feat)
        assert with_hist.current.shape == plain.hidden.shape
        assert np.abs(with_hist.current.data - plain.hidden.data).max() > 0

    def test_history_input_gradients_exactly_zero(self):
        enc = make_encoder(small_config())
        hist = Tensor(Rng(10).normal(size=(12, 8)), requires_grad=True)
        cur = Tensor(Rng(11).normal(size=(16, 8)), requires_grad=True)
        out = enc.encode_long_speech([FeatureSeq(hist)], FeatureSeq(cur))
        tsum(out.current * out.current).backward()
        assert hist.grad is None or not hist.grad.any()
        assert cur.grad is not None and np.abs(cur.grad).max() > 0

    def test_grad_mask_marks_history(self):
        enc = make_encoder(small_config())
        out = enc.encode_long_speech([features(12, 8)], features(13, 16))
        assert out.current_start == 2
        assert not out.grad_mask[:2].any()
        assert out.grad_mask[2:].all()


class TestChunked:
    def chunk_run(self, enc, feat, cfg, banks=None):
        cache = enc.new_cache(banks=banks)
        outs = []
        step = cfg.chunk_input_frames
        data = feat.frames.data
        for i in range(0, data.shape[0], step):
            out, cache = enc.encode_chunk(Tensor(data[i : i + step]), cache)
            outs.append(out.data)
        return np.concatenate(outs, axis=0), cache

    @pytest.mark.parametrize("chunk_frames", [1, 2, 4])
    def test_unbounded_chunks_match_offline(self, chunk_frames):
        cfg = small_config(chunk_frames=chunk_frames)
        enc = make_encoder(cfg)
        feat = features(14, 16)
        offline = enc.encode_offline(feat).hidden.data
        with no_grad():
            chunked, _ = self.chunk_run(enc, feat, cfg)
        np.testing.assert_allclose(chunked, offline, atol=1e-10)

    def test_first_chunk_equals_self_attention_only(self):
        cfg = small_config(chunk_frames=2)
        enc = make_encoder(cfg)
        feat = features(15, 8)
        with no_grad():
            cache = enc.new_cache()
            out, cache = enc.encode_chunk(Tensor(feat.frames.data), cache)
        offline = enc.encode_offline(feat).hidden.data
        np.testing.assert_allclose(out.data, offline, atol=1e-12)

    def test_eviction_keeps_exact_window(self):
        cfg = small_config(chunk_frames=2, left_chunks=8)
        enc = make_encoder(cfg)
        with no_grad():
            cache = enc.new_cache()
            for i in range(10):
                block = Tensor(Rng(100 + i).normal(size=(8, 8)))
                _, cache = enc.encode_chunk(block, cache)
        assert cache.left_len == 8 * cfg.chunk_frames

    def test_windowed_full_pass_matches_chunked(self):
        cfg = small_config(chunk_frames=2, left_chunks=1)
        enc = make_encoder(cfg)
        feat = features(16, 24)
        full = enc.encode_streaming_full(feat).hidden.data
        with no_grad():
            chunked, _ = self.chunk_run(enc, feat, cfg)
        np.testing.assert_allclose(chunked, full, atol=1e-10)

    def test_cache_config_mismatch(self):
        cfg = small_config(chunk_frames=2)
        enc = make_encoder(cfg)
        other = make_encoder(small_config(chunk_frames=4))
        with pytest.raises(ShapeError):
            with no_grad():
                enc.encode_chunk(Tensor(np.zeros((8, 8))), other.new_cache())

    def test_history_bank_changes_outputs_not_shapes(self):
        cfg = small_config(chunk_frames=2, left_chunks=2)
        enc = make_encoder(cfg)
        feat = features(17, 16)
        banks = [Tensor(Rng(200 + i).normal(size=(5, 16))) for i in range(cfg.n_layers)]
        with no_grad():
            plain, _ = self.chunk_run(enc, feat, cfg)
            banked, _ = self.chunk_run(enc, feat, cfg, banks=banks)
        assert banked.shape == plain.shape
        assert np.abs(banked - plain).max() > 0

    def test_banked_chunked_matches_banked_full(self):
        cfg = small_config(chunk_frames=2, left_chunks=2)
        enc = make_encoder(cfg)
        feat = features(18, 16)
        banks = [Tensor(Rng(300 + i).normal(size=(3, 16))) for i in range(cfg.n_layers)]
        full = enc.encode_streaming_full(feat, banks=banks).hidden.data
        with no_grad():
            chunked, _ = self.chunk_run(enc, feat, cfg, banks=banks)
        np.testing.assert_allclose(chunked, full, atol=1e-10)


class TestDownsampling:
    def test_statistical_block_means(self):
        h = np.array([[1.0], [3.0], [5.0], [7.0]])
        out = downsample_history(h, 2, "statistical")
        np.testing.assert_allclose(out.data, [[2.0], [6.0]])

    def test_global_mean(self):
        h = np.array([[1.0], [3.0], [5.0], [7.0]])
        np.testing.assert_allclose(downsample_history(h, 2, "global_mean").data, [[4.0]])

    def test_rate_one_identity(self):
        h = Rng(20).normal(size=(5, 3))
        np.testing.assert_array_equal(downsample_history(h, 1, "statistical").data, h)
        np.testing.assert_array_equal(downsample_history(h, 4, "none").data, h)

    def test_partial_block_true_length_mean(self):
        h = np.array([[1.0], [3.0], [5.0]])
        np.testing.assert_allclose(downsample_history(h, 2, "statistical").data, [[2.0], [5.0]])

    def test_dilated_seeded_and_in_block(self):
        h = np.array([[1.0], [3.0], [5.0], [7.0]])
        a = downsample_history(h, 2, "dilated", Rng(5))
        b = downsample_history(h, 2, "dilated", Rng(5))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data[0, 0] in (1.0, 3.0)
        assert a.data[1, 0] in (5.0, 7.0)

    @pytest.mark.parametrize("rate", [1, 2, 4, 8, 16])
    def test_length_law(self, rate):
        h = Rng(21).normal(size=(12, 3))
        assert downsample_history(h, rate, "statistical").shape[0] == downsampled_length(12, rate, "statistical")
        assert downsample_history(h, rate, "dilated", Rng(1)).shape[0] == -(-12 // rate)

    def test_huge_rate_equals_global_mean(self):
        h = Rng(22).normal(size=(9, 4))
        a = downsample_history(h, 10**9, "statistical").data
        b = downsample_history(h, 3, "global_mean").data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_mix_mode_inference_is_statistical(self):
        h = Rng(23).normal(size=(10, 4))
        runs = [downsample_history(h, 3, "mix", Rng(i), training=False).data for i in range(4)]
        want = downsample_history(h, 3, "statistical").data
        for r in runs:
            np.testing.assert_array_equal(r, want)

    def test_mix_mode_training_uses_both(self):
        h = Rng(24).normal(size=(12, 4))
        stat = downsample_history(h, 3, "statistical").data
        kinds = set()
        for i in range(30):
            out = downsample_history(h, 3, "mix", Rng(i), training=True).data
            kinds.add("stat" if np.allclose(out, stat) else "dilated")
        assert kinds == {"stat", "dilated"}

    def test_bad_rate_rejected(self):
        with pytest.raises(ShapeError):
            downsample_history(np.zeros((3, 2)), 0, "statistical")
        with pytest.raises(ShapeError):
            downsample_history(np.zeros((3, 2)), 2, "sideways")


class TestHistoryBank:
    def test_empty_history_empty_bank(self):
        assert build_history_bank([], small_config()) is None

    def test_row_count_over_utterances(self):
        cfg = small_config(downsample_rate=4, downsample_mode="statistical")
        bank = build_history_bank([np.ones((8, 16)), np.zeros((4, 16))], cfg)
        assert bank.shape == (3, 16)

    def test_idempotent_rebuild(self):
        cfg = small_config(downsample_rate=3, downsample_mode="statistical")
        parts = [Rng(30).normal(size=(7, 16)), Rng(31).normal(size=(5, 16))]
        a = build_history_bank(parts, cfg)
        b = build_history_bank(parts, cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_bank_never_carries_gradients(self):
        cfg = small_config()
        src = Tensor(Rng(32).normal(size=(8, 16)), requires_grad=True)
        bank = build_history_bank([src], cfg)
        assert not bank.requires_grad
