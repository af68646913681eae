import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rvqtok.codecnet import EncoderDecoder, encode
from rvqtok.features import (HOP, FormatError, TeacherEmbeddings, Waveform, align_frames, decode_tensor,
                             encode_tensor, frame_count, hz_to_mel, load_tensor, log_mel, read_wav,
                             save_tensor, stft, stft_backward, synth_corpus, synth_teachers, synth_utterance,
                             track_f0, write_wav)

from oracles import dft_frames


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestWaveform:
    def test_length_and_duration(self):
        w = Waveform(16000, np.zeros(8000))
        assert len(w) == 8000 and w.duration == 0.5

    def test_rejects_out_of_range_samples(self):
        with pytest.raises(ValueError):
            Waveform(16000, [0.0, 1.5])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Waveform(16000, [0.0, np.nan])


class TestFtz1:
    def test_known_bytes(self):
        # magic, rank 2, dims (2, 1), then 1.0 and -2.0 as little-endian f32
        assert encode_tensor(np.array([[1.0], [-2.0]])).hex() == "46545a310202000000010000000000803f000000c0"

    def test_round_trip_random(self, tmp_path):
        m = np.random.default_rng(0).normal(size=(17, 5)).astype(np.float32)
        save_tensor(tmp_path / "m.ftz", m)
        back = load_tensor(tmp_path / "m.ftz")
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back.astype(np.float32).view(np.uint32), m.view(np.uint32))

    def test_empty_matrix(self):
        assert decode_tensor(encode_tensor(np.zeros((0, 0)))).shape == (0, 0)

    def test_bad_magic(self):
        buf = b"XXXX" + encode_tensor(np.ones((1, 1)))[4:]
        with pytest.raises(FormatError, match="offset 0"):
            decode_tensor(buf)

    def test_truncated_payload(self):
        with pytest.raises(FormatError, match="offset 13"):
            decode_tensor(encode_tensor(np.ones((2, 2)))[:-1])

    def test_size_formula(self):
        assert len(encode_tensor(np.ones((3, 4, 2)))) == 5 + 4 * 3 + 4 * 24

    @settings(max_examples=50)
    @given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(0, 6)),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_bit_exact_for_finite_f32(self, m):
        back = decode_tensor(encode_tensor(m)).astype(np.float32)
        np.testing.assert_array_equal(back.view(np.uint32), m.view(np.uint32))


class TestWav:
    def test_round_trip_pcm16(self, tmp_path):
        pcm = np.random.default_rng(1).integers(-32768, 32768, 500)
        w = Waveform(16000, pcm / 32768.0)
        write_wav(tmp_path / "a.wav", w)
        np.testing.assert_array_equal(read_wav(tmp_path / "a.wav").samples, w.samples)

    def test_rejects_stereo(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "s.wav"), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(16000)
            f.writeframes(b"\0" * 40)
        with pytest.raises(FormatError, match="mono"):
            read_wav(tmp_path / "s.wav")

    def test_rejects_other_rate(self, tmp_path):
        write_wav(tmp_path / "r.wav", Waveform(8000, np.zeros(10)))
        with pytest.raises(FormatError):
            read_wav(tmp_path / "r.wav")

    def test_garbage_is_format_error(self, tmp_path):
        (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
        with pytest.raises(FormatError):
            read_wav(tmp_path / "g.wav")


class TestStft:
    def test_bin_centered_sine(self):
        k = 32
        x = np.sin(2 * np.pi * k * np.arange(4096) / 1024)
        mag2 = np.abs(stft(x)) ** 2
        mid = mag2[2:-2]
        # the Hann main lobe spans bins k-1..k+1
        assert np.all(mid[:, k - 1:k + 2].sum(axis=1) / mid.sum(axis=1) > 0.95)
        assert np.all(np.argmax(mid, axis=1) == k)

    def test_zero_signal(self):
        assert not np.any(stft(np.zeros(3000)))

    def test_matches_naive_dft(self):
        x = np.random.default_rng(2).normal(size=1024)
        np.testing.assert_allclose(stft(x, 64, 32), dft_frames(x, 64, 32), atol=1e-9)
        np.testing.assert_allclose(stft(x[:300], 256, 80), dft_frames(x[:300], 256, 80), atol=1e-9)

    def test_short_signal_single_zero_padded_frame(self):
        s = stft(np.ones(10))
        assert s.shape == (1, 513)
        assert s[0, 0].real == pytest.approx(np.sum(np.hanning(1025)[:10]), rel=1e-2)

    def test_silence_prefix_shifts_frames(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([np.zeros(2048), rng.normal(size=4096), np.zeros(2048)])
        shifted = np.concatenate([np.zeros(HOP * 4), x])
        a, b = stft(x), stft(shifted)
        # interior frames (away from the reflect-padded edges) line up exactly
        np.testing.assert_allclose(b[4 + 4:4 + 20], a[4:20], atol=1e-9)

    def test_backward_is_adjoint(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=2000)
        g = rng.normal(size=stft(x).shape) + 1j * rng.normal(size=stft(x).shape)
        lhs = np.sum(np.real(stft(x)) * g.real + np.imag(stft(x)) * g.imag)
        assert lhs == pytest.approx(np.dot(x, stft_backward(g, len(x))), rel=1e-10)

    def test_invalid_fft_size(self):
        with pytest.raises(ValueError):
            stft(np.zeros(10), fft_size=1000)


class TestFraming:
    @pytest.mark.parametrize("n", range(1, 4 * HOP + 1, 37))
    def test_encoder_frames_match_formula(self, n):
        model = EncoderDecoder(seed=0)
        assert encode(model, np.zeros(n)).shape[0] == frame_count(n) == -(-n // HOP)

    def test_teacher_frames_within_one(self):
        for w in synth_corpus(0, 4):
            t = synth_teachers(w, 8, 4, 0)
            assert abs(t.semantic.shape[0] - frame_count(len(w))) <= 1

    def test_align_truncates_to_minimum(self):
        a, b = align_frames(np.zeros((5, 2)), np.zeros((4, 3)))
        assert a.shape == (4, 2) and b.shape == (4, 3)

    def test_eight_thousand_samples_fifty_hz(self):
        assert frame_count(8000) == 25


class TestMel:
    def test_htk_mel_of_1khz(self):
        assert hz_to_mel(1000.0) == pytest.approx(999.9855371396244, abs=1e-9)

    def test_log_mel_shape(self):
        assert log_mel(np.zeros(3200)).shape == (11, 64)


class TestCorpus:
    def test_deterministic(self):
        a, b = synth_corpus(5, 3), synth_corpus(5, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.samples, y.samples)

    def test_fixed_duration(self):
        assert all(len(w) == 8000 for w in synth_corpus(1, 5, (0.5, 0.5)))

    def test_peak_in_range(self):
        for w in synth_corpus(2, 10):
            assert 0.3 - 1e-9 <= np.abs(w.samples).max() <= 0.9 + 1e-9

    def test_needs_one_utterance(self):
        with pytest.raises(ValueError):
            synth_corpus(0, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_f0_recovered_by_tracker(self, seed):
        rng = np.random.default_rng(seed)
        x, f0 = synth_utterance(rng, 16000)
        est = track_f0(x)
        centers = 200 + 160 * np.arange(len(est))
        voiced = np.isfinite(est)
        assert voiced.mean() > 0.8
        rel = np.abs(est[voiced] - f0[centers[voiced]]) / f0[centers[voiced]]
        assert np.median(rel) < 0.05


class TestTeachers:
    def setup_method(self):
        self.corpus = synth_corpus(0, 6)

    def test_deterministic(self):
        a = synth_teachers(self.corpus[0], 16, 8, 3)
        b = synth_teachers(self.corpus[0], 16, 8, 3)
        np.testing.assert_array_equal(a.semantic, b.semantic)
        np.testing.assert_array_equal(a.acoustic, b.acoustic)

    def test_shapes(self):
        t = synth_teachers(self.corpus[0], 16, 8, 0)
        assert isinstance(t, TeacherEmbeddings)
        assert t.semantic.shape[1] == 16 and t.acoustic.shape == (8,)
        assert np.linalg.norm(t.acoustic) > 0

    def test_time_shift(self):
        w = self.corpus[1]
        shifted = Waveform(16000, np.concatenate([np.zeros(HOP * 3), w.samples]))
        a, b = synth_teachers(w, 16, 8, 0), synth_teachers(shifted, 16, 8, 0)
        assert _cos(a.acoustic, b.acoustic) > 0.99
        # semantic frames move by three frames
        np.testing.assert_allclose(b.semantic[3 + 5:3 + 30], a.semantic[5:30], atol=1e-6)

    def test_different_f0_differs(self):
        rng = np.random.default_rng(0)
        lo, _ = synth_utterance(rng, 24000, f0_contour=np.full(10, 90.0))
        hi, _ = synth_utterance(rng, 24000, f0_contour=np.full(10, 260.0))
        a = synth_teachers(Waveform(16000, lo), 16, 8, 0)
        b = synth_teachers(Waveform(16000, hi), 16, 8, 0)
        assert _cos(a.acoustic, b.acoustic) < 0.95

    def test_small_dims_rejected(self):
        with pytest.raises(ValueError):
            synth_teachers(self.corpus[0], 1, 8, 0)
