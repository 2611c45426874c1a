import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milser.bagging import (
    LOG_FLOOR,
    BagSet,
    assemble_bag,
    clamp_utterance,
    frames_for_seconds,
    num_segments,
    segment_frames,
    segment_utterance,
    stack_bags,
    t_max_for,
)
from milser.dsp import MelSpectrogram
from milser.errors import EmptyBag, UtteranceTooShort


def spec(n_frames, seed=0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram("u", rng.normal(size=(n_frames, 64)))


class TestCounts:
    @pytest.mark.parametrize("seconds,frames", [(2.07, 205), (4.55, 453), (1.0, 98), (0.335, 32), (3.0, 298)])
    def test_frames_for_seconds(self, seconds, frames):
        assert frames_for_seconds(seconds) == frames

    @pytest.mark.parametrize("frames,segments", [(205, 29), (453, 71), (32, 1), (37, 1), (38, 2), (31, 0)])
    def test_num_segments(self, frames, segments):
        assert num_segments(frames) == segments

    @pytest.mark.parametrize("seconds,t_max", [(2.07, 29), (4.55, 71)])
    def test_t_max(self, seconds, t_max):
        assert t_max_for(seconds) == t_max

    @given(st.integers(32, 2000))
    def test_monotone(self, f):
        assert num_segments(f + 1) >= num_segments(f)


class TestSegmentation:
    def test_205_frames(self):
        segs = segment_utterance(spec(205), label=2)
        assert len(segs) == 29
        assert [s.start_frame for s in segs] == list(range(0, 169, 6))
        assert all(s.label == 2 and s.features.shape == (32, 64) for s in segs)

    def test_exact_32(self):
        segs = segment_utterance(spec(32))
        assert len(segs) == 1 and segs[0].start_frame == 0

    def test_content_and_overlap(self):
        s = spec(100)
        w = segment_frames(s.frames)
        for t in range(w.shape[0]):
            np.testing.assert_array_equal(w[t], s.frames[6 * t: 6 * t + 32])
        np.testing.assert_array_equal(w[0, 6:], w[1, :26])

    def test_copy_not_view(self):
        s = spec(40)
        w = segment_frames(s.frames)
        w[0, 0, 0] = 1e9
        assert s.frames[0, 0] != 1e9

    def test_short_padded_by_default(self):
        w = segment_frames(spec(20).frames)
        assert w.shape == (1, 32, 64)
        assert np.all(w[0, 20:] == LOG_FLOOR)

    def test_short_strict(self):
        with pytest.raises(UtteranceTooShort):
            segment_utterance(spec(20), pad_short=False)


class TestClamp:
    def test_truncates(self):
        out = clamp_utterance(spec(298), 2.07)
        assert out.frames.shape[0] == 205

    def test_identity_at_max(self):
        s = spec(205)
        assert clamp_utterance(s, 2.07) is s

    def test_pads_with_log_floor(self):
        s = spec(98)
        out = clamp_utterance(s, 2.07)
        np.testing.assert_array_equal(out.frames[:98], s.frames)
        assert np.all(out.frames[98:] == LOG_FLOOR)
        assert LOG_FLOOR == pytest.approx(np.log(1e-10))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            clamp_utterance(spec(50), 0.0)


class TestAssemble:
    @pytest.mark.parametrize("n,t_max,length", [(29, 29, 29), (10, 29, 10), (40, 29, 29)])
    def test_lengths(self, n, t_max, length):
        emb = np.arange(n * 4, dtype=np.float32).reshape(n, 4) + 1
        bag = assemble_bag(emb, 1, t_max, "u")
        assert bag.true_length == length
        assert bag.mask.sum() == length and bag.mask[:length].all()
        np.testing.assert_array_equal(bag.embeddings[:length], emb[:length])
        assert np.all(bag.embeddings[length:] == 0)

    def test_empty(self):
        with pytest.raises(EmptyBag):
            assemble_bag(np.zeros((0, 64)), 0, 29)

    @given(st.integers(1, 40), st.integers(1, 40))
    @settings(max_examples=40)
    def test_masked_rows_round_trip(self, n, t_max):
        rng = np.random.default_rng(n * 100 + t_max)
        emb = rng.normal(size=(n, 8))
        bag = assemble_bag(emb, 0, t_max)
        assert bag.embeddings[bag.mask].tobytes() == emb[: min(n, t_max)].tobytes()

    def test_stack_and_subset(self):
        bags = [assemble_bag(np.ones((k, 3)), k % 2, 5, f"u{k}") for k in (1, 3, 5)]
        bs = stack_bags(bags)
        assert isinstance(bs, BagSet) and len(bs) == 3
        assert bs.X.shape == (3, 5, 3) and bs.mask.sum(axis=1).tolist() == [1, 3, 5]
        sub = bs.subset([2])
        assert sub.ids == ["u5"] and sub.y.tolist() == [1]
        assert [b.true_length for b in bs.bags()] == [1, 3, 5]
