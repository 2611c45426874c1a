import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milser.dsp import (
    AudioClip,
    DspConfig,
    build_mel_filterbank,
    featurize,
    frame_geometry,
    hz_to_mel,
    log_mel,
    mel_to_hz,
    num_frames,
    read_wav,
    stft_power,
    write_wav,
)
from milser.errors import ClipTooShort, InvalidRange, InvalidRate, ShapeMismatch, UnsupportedAudio


def naive_power(frame, nfft):
    """O(N^2) DFT of a zero-padded frame, bins 0..nfft/2."""
    n = np.arange(len(frame))
    out = []
    for k in range(nfft // 2 + 1):
        re = sum(frame[i] * math.cos(2 * math.pi * k * i / nfft) for i in n)
        im = -sum(frame[i] * math.sin(2 * math.pi * k * i / nfft) for i in n)
        out.append(re * re + im * im)
    return np.array(out)


def clip(samples, sr=16000, cid="c"):
    return AudioClip(cid, np.asarray(samples, dtype=np.float64), sr)


class TestGeometry:
    def test_16k_geometry(self):
        assert frame_geometry(16000, 25, 10) == (400, 160)

    def test_335ms_gives_32_frames(self):
        power = stft_power(clip(np.zeros(5360)))
        assert power.shape == (32, 257)

    def test_zero_signal_one_frame(self):
        power = stft_power(clip(np.zeros(400)))
        assert power.shape == (1, 257)
        assert np.all(power == 0)

    @given(st.integers(min_value=400, max_value=20000))
    @settings(max_examples=60, deadline=None)
    def test_frame_count_formula(self, n):
        expected = 1 + (n - 400) // 160
        assert num_frames(n, 400, 160) == expected
        assert stft_power(clip(np.zeros(n))).shape[0] == expected

    def test_too_short(self):
        with pytest.raises(ClipTooShort):
            stft_power(clip(np.zeros(399)))

    def test_rate_mismatch(self):
        with pytest.raises(InvalidRate):
            stft_power(clip(np.zeros(800), sr=8000), expected_rate=16000)


class TestStftOracle:
    @pytest.mark.parametrize("k", [3, 17, 64])
    def test_bin_centred_sinusoid(self, k):
        sr, nfft = 16000, 512
        t = np.arange(400) / sr
        x = 0.5 * np.sin(2 * np.pi * k * sr / nfft * t)
        got = stft_power(clip(x))[0]
        ref = naive_power(x * np.hamming(400), nfft)
        np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9 * ref.max())

    def test_random_frames_match_naive_dft(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-0.5, 0.5, 560)
        got = stft_power(clip(x))
        for f in range(got.shape[0]):
            frame = x[f * 160: f * 160 + 400] * np.hamming(400)
            ref = naive_power(frame, 512)
            np.testing.assert_allclose(got[f], ref, rtol=1e-6, atol=1e-12 * ref.max())

    def test_parseval_rect_window(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, 512)
        power = stft_power(clip(x, sr=512 * 40), window_ms=25, hop_ms=10, nfft=512, window="rect")[0]
        # window is 512 samples at this rate; count interior bins twice
        win = frame_geometry(512 * 40, 25, 10)[0]
        frame = x[:win]
        total = power[0] + power[-1] + 2 * power[1:-1].sum()
        assert total / 512 == pytest.approx(np.sum(frame**2), rel=1e-6)

    def test_nonnegative_and_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, 4000)
        a, b = stft_power(clip(x)), stft_power(clip(x.copy()))
        assert np.all(a >= 0) and np.all(np.isfinite(a))
        assert a.tobytes() == b.tobytes()


class TestMelScale:
    def test_mel_700(self):
        assert float(hz_to_mel(700.0)) == pytest.approx(781.17, abs=0.01)

    def test_mel_zero(self):
        assert float(hz_to_mel(0.0)) == 0.0

    @given(st.floats(min_value=0, max_value=8000))
    def test_round_trip(self, f):
        assert float(mel_to_hz(hz_to_mel(f))) == pytest.approx(f, abs=1e-6)


class TestFilterBank:
    def setup_method(self):
        self.bank = build_mel_filterbank(16000, 512, 64, 0.0, 8000.0)

    def test_shape_and_sign(self):
        w = self.bank.weights
        assert w.shape == (257, 64)
        assert np.all(w >= 0)
        assert np.all(w.max(axis=0) > 0)

    def test_triangular_columns(self):
        for m in range(64):
            col = self.bank.weights[:, m]
            nz = np.flatnonzero(col)
            seg = col[nz[0]: nz[-1] + 1]
            peak = int(np.argmax(seg))
            assert np.all(np.diff(seg[: peak + 1]) >= 0)
            assert np.all(np.diff(seg[peak:]) <= 0)

    def test_coverage_between_first_and_last_peak(self):
        w = self.bank.weights
        peaks = w.argmax(axis=0)
        assert np.all(w[peaks[0]: peaks[-1] + 1].sum(axis=1) > 0)

    def test_peaks_equally_spaced_on_mel(self):
        edges = np.linspace(0, hz_to_mel(8000), 66)
        centres = mel_to_hz(edges[1:-1])
        peak_hz = self.bank.weights.argmax(axis=0) * 16000 / 512
        # peak bin is the FFT bin nearest each centre frequency
        assert np.all(np.abs(peak_hz - centres) <= 16000 / 512)

    @pytest.mark.parametrize("fmin,fmax", [(4000, 4000), (5000, 1000), (0, 9000), (-1, 100)])
    def test_invalid_range(self, fmin, fmax):
        with pytest.raises(InvalidRange):
            build_mel_filterbank(16000, 512, 64, fmin, fmax)


class TestLogMel:
    def setup_method(self):
        self.bank = build_mel_filterbank(16000, 512, 64)

    def test_zero_power_hits_floor(self):
        out = log_mel(np.zeros((2, 257)), self.bank, 1e-10)
        np.testing.assert_allclose(out.frames, -23.025850929940457, rtol=0, atol=1e-12)

    def test_ones_give_log_column_sum(self):
        out = log_mel(np.ones((1, 257)), self.bank)
        np.testing.assert_allclose(out.frames[0], np.log(self.bank.weights.sum(axis=0)), rtol=1e-12)

    def test_matches_per_filter_accumulation(self):
        rng = np.random.default_rng(9)
        power = rng.exponential(size=(3, 257))
        out = log_mel(power, self.bank).frames
        for f in range(3):
            for m in range(64):
                acc = 0.0
                for b in range(257):
                    acc += power[f, b] * self.bank.weights[b, m]
                assert out[f, m] == pytest.approx(math.log(max(acc, 1e-10)), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            log_mel(np.ones((1, 256)), self.bank)

    @pytest.mark.parametrize("scale", [1.5, 4.0])
    def test_monotone_in_amplitude(self, scale):
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.2, 0.2, 3000)
        cfg = DspConfig()
        lo = featurize(clip(x), cfg).frames
        hi = featurize(clip(x * scale), cfg).frames
        above = lo > np.log(1e-10)
        assert np.all(hi[above] >= lo[above])


class TestFeaturize:
    def test_normalize_option(self):
        rng = np.random.default_rng(0)
        spec = featurize(clip(rng.uniform(-0.3, 0.3, 16000)), DspConfig(normalize=True))
        np.testing.assert_allclose(spec.frames.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(spec.frames.std(axis=0), 1, atol=1e-6)

    def test_rejects_wrong_rate(self):
        with pytest.raises(InvalidRate):
            featurize(clip(np.zeros(8000), sr=8000))


class TestWav:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        x = np.round(rng.uniform(-0.9, 0.9, 1000) * 32767) / 32767
        write_wav(tmp_path / "a.wav", x, 16000)
        c = read_wav(tmp_path / "a.wav")
        assert c.sample_rate == 16000 and c.id == "a"
        np.testing.assert_allclose(c.samples, np.round(x * 32767) / 32768, atol=0)

    def test_rejects_stereo(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "s.wav"), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00" * 400)
        with pytest.raises(UnsupportedAudio):
            read_wav(tmp_path / "s.wav")

    def test_rejects_8bit(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "b.wav"), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(16000)
            wf.writeframes(b"\x80" * 400)
        with pytest.raises(UnsupportedAudio):
            read_wav(tmp_path / "b.wav")
