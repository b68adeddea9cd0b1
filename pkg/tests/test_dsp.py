import wave

import numpy as np
import pytest

from avcrn import dsp
from avcrn.datagen import synth_speech
from avcrn.metrics import si_sdr, stoi


def direct_dft(frame: np.ndarray) -> np.ndarray:
    """O(N^2) DFT of one frame, independent of np.fft."""
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    return (frame[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


class TestHann:
    def test_closed_form(self):
        np.testing.assert_allclose(dsp.hann_window(4), [0.0, 0.5, 1.0, 0.5], atol=1e-15)

    def test_single(self):
        np.testing.assert_array_equal(dsp.hann_window(1), [0.0])

    def test_zero_length(self):
        with pytest.raises(ValueError):
            dsp.hann_window(0)

    def test_cola_at_hop_160(self):
        w = dsp.hann_window(640)
        total = np.zeros(640 + 9 * 160)
        for i in range(10):
            total[i * 160:i * 160 + 640] += w
        # samples covered by four windows
        np.testing.assert_allclose(total[480:9 * 160 + 160], 2.0, atol=1e-12)


class TestStft:
    def test_200ms_gives_20_frames(self):
        spec = dsp.stft(np.random.default_rng(0).standard_normal(3200))
        assert spec.shape == (321, 20)

    @pytest.mark.parametrize("n", [1, 159, 160, 161, 3199, 16000])
    def test_frame_count_is_ceil(self, n):
        assert dsp.stft(np.ones(n)).shape[1] == -(-n // 160)

    def test_zero_input(self):
        assert not np.any(dsp.stft(np.zeros(1600)))

    def test_empty(self):
        with pytest.raises(ValueError):
            dsp.stft(np.zeros(0))

    def test_sine_peak_and_direct_dft(self):
        t = np.arange(16000) / 16000
        x = np.sin(2 * np.pi * 1000 * t)
        spec = dsp.stft(x)
        # frame 10 is centred on sample 1600 and needs no padding
        frame = x[1600 - 320:1600 + 320] * dsp.hann_window(640)
        np.testing.assert_allclose(spec[:, 10], direct_dft(frame), atol=1e-9)
        assert np.argmax(np.abs(spec[:, 10])) == 40


class TestIstft:
    def test_round_trip_snr(self):
        x = np.random.default_rng(1).standard_normal(16000)
        y = dsp.istft(dsp.stft(x), len(x))
        inner = slice(640, -640)
        snr = 10 * np.log10(np.sum(x[inner] ** 2) / np.sum((x - y)[inner] ** 2))
        assert snr > 40

    def test_zero(self):
        assert not np.any(dsp.istft(np.zeros((321, 10), complex)))

    def test_single_frame_matches_hand_overlap_add(self):
        rng = np.random.default_rng(2)
        spec = rng.standard_normal((321, 1)) + 1j * rng.standard_normal((321, 1))
        spec[0] = spec[0].real
        spec[-1] = spec[-1].real
        w = dsp.hann_window(640)
        frame = np.fft.irfft(spec[:, 0], 640)
        expected = (w * frame)[320:480] / w[320:480] ** 2
        np.testing.assert_allclose(dsp.istft(spec), expected, rtol=1e-12)

    def test_windowed_constant_frame(self):
        spec = np.fft.rfft(dsp.hann_window(640) * 0.25)[:, None]
        np.testing.assert_allclose(dsp.istft(spec), 0.25, atol=1e-12)

    def test_bad_rows(self):
        with pytest.raises(ValueError):
            dsp.istft(np.zeros((100, 4)))


class TestMelFilterbank:
    fb = dsp.mel_filterbank()

    def test_shape(self):
        assert self.fb.shape == (80, 321)

    def test_nonnegative_and_nonempty(self):
        assert np.all(self.fb >= 0)
        assert np.all(self.fb.max(axis=1) > 0)

    def test_column_sums(self):
        assert np.all(self.fb.sum(axis=0) <= 2.0)

    def test_centres_monotone(self):
        assert np.all(np.diff(np.argmax(self.fb, axis=1)) >= 0)

    def test_rows_unimodal(self):
        for row in self.fb:
            nz = row[row > 0]
            peak = np.argmax(nz)
            assert np.all(np.diff(nz[:peak + 1]) >= 0)
            assert np.all(np.diff(nz[peak:]) <= 0)

    def test_centres_uniform_on_mel_scale(self):
        mel_max = 2595 * np.log10(1 + 8000 / 700)
        centres_hz = 700 * (10 ** (np.linspace(0, mel_max, 82)[1:-1] / 2595) - 1)
        freqs = np.arange(321) * 25.0
        for k in (10, 40, 79):
            # the peak bin is one of the two bins bracketing the centre
            assert abs(freqs[np.argmax(self.fb[k])] - centres_hz[k]) <= 25.0


class TestLogMel:
    def test_zero(self):
        np.testing.assert_allclose(dsp.log_mel(np.zeros((321, 7))), np.log(1e-8))

    def test_rows(self):
        assert dsp.log_mel(dsp.stft(np.ones(3200))).shape == (80, 20)

    def test_doubling(self):
        spec = dsp.stft(np.random.default_rng(3).standard_normal(3200))
        a, b = dsp.log_mel(spec), dsp.log_mel(2 * spec)
        mask = a > np.log(1e-8) + 10
        np.testing.assert_allclose((b - a)[mask], np.log(2), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsp.log_mel(np.zeros((320, 5)))


class TestChunk:
    @pytest.mark.parametrize("t,k", [(60, 3), (20, 1), (39, 1), (19, 0)])
    def test_counts(self, t, k):
        assert len(dsp.chunk(np.zeros((80, t)))) == k

    def test_identity(self):
        m = np.random.default_rng(4).standard_normal((80, 20))
        np.testing.assert_array_equal(dsp.chunk(m)[0], m)

    def test_concatenation_reproduces_prefix(self):
        m = np.random.default_rng(5).standard_normal((80, 67))
        np.testing.assert_array_equal(np.concatenate(dsp.chunk(m), axis=1), m[:, :60])


class TestMelPseudoInverse:
    def test_zero_chunk_is_silent(self):
        phase = dsp.stft(np.random.default_rng(6).standard_normal(3200))
        y = dsp.mel_pseudo_inverse(np.full((80, 20), np.log(1e-8)), phase, 3200)
        assert np.max(np.abs(y)) < 1e-3

    def test_own_phase_round_trip(self):
        x = synth_speech(11, 1.0)
        spec = dsp.stft(x)
        y = dsp.mel_pseudo_inverse(dsp.log_mel(spec), spec, len(x))
        assert si_sdr(x, y) >= 10.0
        assert stoi(x, y) >= 0.9

    def test_frame_mismatch(self):
        with pytest.raises(ValueError):
            dsp.mel_pseudo_inverse(np.zeros((80, 20)), np.zeros((321, 21), complex))


class TestMixAtSnr:
    def test_equal_power_zero_db(self):
        rng = np.random.default_rng(7)
        clean, noise = rng.standard_normal(1000), rng.standard_normal(1000)
        noise *= np.sqrt(dsp.power(clean) / dsp.power(noise))
        np.testing.assert_allclose(dsp.mix_at_snr(clean, noise, 0.0, 0) - clean, noise, atol=1e-12)

    def test_gain_at_20db(self):
        rng = np.random.default_rng(8)
        clean, noise = rng.standard_normal(1000), 3 * rng.standard_normal(1000)
        g = np.sqrt(dsp.power(clean) / dsp.power(noise)) / 10
        np.testing.assert_allclose(dsp.mix_at_snr(clean, noise, 20.0, 0) - clean, g * noise, atol=1e-12)

    @pytest.mark.parametrize("snr", [-10.0, -5.0, 0.0, 3.3, 10.0])
    def test_measured_snr(self, snr):
        rng = np.random.default_rng(9)
        clean, noise = rng.standard_normal(4000), rng.standard_normal(9000)
        mix = dsp.mix_at_snr(clean, noise, snr, 42)
        assert abs(dsp.snr_db(clean, mix - clean) - snr) < 1e-6

    def test_scale_equivariance(self):
        rng = np.random.default_rng(10)
        clean, noise = rng.standard_normal(4000), rng.standard_normal(6000)
        a = 0.37
        np.testing.assert_allclose(dsp.mix_at_snr(a * clean, noise, 2.0, 5),
                                   a * dsp.mix_at_snr(clean, noise, 2.0, 5), rtol=1e-12)

    def test_silent_inputs(self):
        with pytest.raises(ValueError):
            dsp.mix_at_snr(np.zeros(100), np.ones(100), 0.0)
        with pytest.raises(ValueError):
            dsp.mix_at_snr(np.ones(100), np.zeros(100), 0.0)

    def test_short_noise(self):
        with pytest.raises(ValueError):
            dsp.mix_at_snr(np.ones(100), np.ones(50), 0.0)


class TestWav:
    def test_round_trip(self, tmp_path):
        x = 0.5 * np.sin(np.linspace(0, 100, 1600))
        dsp.write_wav(tmp_path / "a.wav", x)
        np.testing.assert_allclose(dsp.read_wav(tmp_path / "a.wav"), x, atol=1 / 32768)

    @pytest.mark.parametrize("channels,width,rate", [(2, 2, 16000), (1, 1, 16000), (1, 2, 8000)])
    def test_rejects_other_formats(self, tmp_path, channels, width, rate):
        path = tmp_path / "bad.wav"
        with wave.open(str(path), "wb") as f:
            f.setnchannels(channels)
            f.setsampwidth(width)
            f.setframerate(rate)
            f.writeframes(b"\0" * 64)
        with pytest.raises(ValueError):
            dsp.read_wav(path)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"not a wav file at all")
        with pytest.raises(ValueError):
            dsp.read_wav(path)
