import json

import numpy as np
import pytest
from pystoi import stoi as reference_stoi
from scipy.signal import resample_poly

from avcrn import datagen, gradcheck, metrics
from avcrn.datagen import SynthSpec
from avcrn.model import AVCRN, ModelConfig


def speech(seed=0, length=1.0):
    return datagen.synth_speech(seed, length)


class TestStoi:
    def test_identity(self):
        x = speech()
        assert metrics.stoi(x, x) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("gain", [0.3, 4.0])
    def test_scale_invariant(self, gain):
        rng = np.random.default_rng(0)
        x = speech()
        y = x + 0.3 * rng.standard_normal(len(x))
        assert metrics.stoi(x, gain * y) == pytest.approx(metrics.stoi(x, y), abs=1e-6)
        assert metrics.stoi(x, gain * x) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_white_noise_low(self, seed):
        x = speech(seed)
        n = np.random.default_rng(seed).standard_normal(len(x))
        ours = metrics.stoi(x, n)
        assert ours < 0.25
        assert ours == pytest.approx(reference_stoi(x, n, 16000, extended=False), abs=0.03)

    @pytest.mark.parametrize("seed,snr", [(0, 10.0), (1, 0.0), (2, -5.0), (3, -10.0)])
    def test_matches_reference_implementation_at_10k(self, seed, snr):
        x = resample_poly(speech(seed, 1.5), 5, 8)
        n = np.random.default_rng(seed).standard_normal(len(x))
        n *= np.sqrt(np.mean(x ** 2) / np.mean(n ** 2) / 10 ** (snr / 10))
        ref = reference_stoi(x, x + n, 10000, extended=False)
        assert metrics.stoi(x, x + n, fs=10000) == pytest.approx(ref, abs=1e-6)

    @pytest.mark.parametrize("seed,snr", [(0, 10.0), (1, 0.0), (2, -5.0), (3, -10.0)])
    def test_close_to_reference_at_16k(self, seed, snr):
        # the two resampling filters differ slightly; scoring is otherwise identical
        x = speech(seed, 1.5)
        n = np.random.default_rng(seed).standard_normal(len(x))
        n *= np.sqrt(np.mean(x ** 2) / np.mean(n ** 2) / 10 ** (snr / 10))
        ref = reference_stoi(x, x + n, 16000, extended=False)
        assert metrics.stoi(x, x + n) == pytest.approx(ref, abs=0.03)

    def test_monotone_in_snr(self):
        x = speech(4)
        n = np.random.default_rng(4).standard_normal(len(x)) * np.std(x)
        scores = [metrics.stoi(x, x + g * n) for g in (0.1, 0.5, 1.0, 3.0)]
        assert scores == sorted(scores, reverse=True)

    def test_bounded_above(self):
        rng = np.random.default_rng(5)
        x = speech(5)
        for _ in range(5):
            assert metrics.stoi(x, x + 0.05 * rng.standard_normal(len(x))) <= 1 + 1e-6

    def test_too_short(self):
        with pytest.raises(ValueError):
            metrics.stoi(np.ones(6000), np.ones(6000))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            metrics.stoi(speech(), speech()[:-1])

    def test_band_matrix(self):
        obm = metrics.third_octave_matrix()
        assert obm.shape == (15, 257)
        assert np.all(obm.sum(axis=0) <= 1)
        first = np.argmax(obm, axis=1)
        assert np.all(np.diff(first) > 0)


class TestSiSdr:
    def test_identity_capped(self):
        x = speech()
        assert metrics.si_sdr(x, x) == 100.0
        assert metrics.si_sdr(x, 2 * x) == 100.0

    def test_scale_invariant(self):
        rng = np.random.default_rng(6)
        x = speech()
        y = x + 0.1 * rng.standard_normal(len(x))
        assert metrics.si_sdr(x, 3.7 * y) == pytest.approx(metrics.si_sdr(x, y), abs=1e-9)

    def test_closed_form_orthogonal(self):
        s = np.array([1.0, 0.0, 0.0, 0.0])
        e = np.array([1.0, 0.5, 0.0, 0.0])
        assert metrics.si_sdr(s, e) == pytest.approx(10 * np.log10(1 / 0.25), abs=1e-12)

    def test_equal_power_noise_near_zero_db(self):
        rng = np.random.default_rng(7)
        vals = []
        for _ in range(200):
            s = rng.standard_normal(4000)
            n = rng.standard_normal(4000)
            n *= np.linalg.norm(s) / np.linalg.norm(n)
            vals.append(metrics.si_sdr(s, s + n))
        assert abs(np.mean(vals)) < 0.5

    def test_silent_reference(self):
        with pytest.raises(ValueError):
            metrics.si_sdr(np.zeros(10), np.ones(10))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.si_sdr(np.ones(10), np.ones(11))


@pytest.fixture(scope="module")
def small_test_set():
    spec = SynthSpec(n_train=1, n_val=1, n_test=3, video_dim=8, seed=2)
    return datagen.build_corpus(spec)["test"]


@pytest.fixture(scope="module")
def tiny_model():
    return AVCRN(ModelConfig(**gradcheck.TINY))


class TestEvaluateCorpus:
    def test_rows(self, small_test_set, tiny_model):
        report = metrics.evaluate_corpus(tiny_model, small_test_set)
        conditions = [r.condition for r in report.rows]
        for snr in ("0dB", "-5dB"):
            for fam in datagen.NOISE_FAMILIES:
                assert f"{snr}/{fam}" in conditions
            assert report.row(f"{snr}/all").n == 3

    def test_noisy_column_is_direct_scoring(self, small_test_set, tiny_model):
        report = metrics.evaluate_corpus(tiny_model, small_test_set)
        at0 = [ex for ex in small_test_set if ex.snr_db == 0.0]
        row = report.row("0dB/all")
        assert row.stoi_noisy == pytest.approx(np.mean([metrics.stoi(e.clean, e.noisy) for e in at0]), abs=1e-12)
        assert row.sisdr_noisy == pytest.approx(np.mean([metrics.si_sdr(e.clean, e.noisy) for e in at0]), abs=1e-12)

    def test_deterministic_and_formats(self, small_test_set, tiny_model):
        a = metrics.evaluate_corpus(tiny_model, small_test_set)
        b = metrics.evaluate_corpus(tiny_model, small_test_set)
        assert a.to_jsonl() == b.to_jsonl()
        table = a.to_table()
        assert "PESQ" in table and "SI-SDR" in table
        assert all(c in table for c in metrics.REPORT_COLUMNS)
        records = [json.loads(line) for line in a.to_jsonl().splitlines()]
        assert set(records[0]) == set(metrics.REPORT_COLUMNS)

    def test_from_disk(self, small_test_set, tiny_model, tmp_path):
        datagen.save_corpus({"test": small_test_set}, tmp_path)
        report = metrics.evaluate_corpus(tiny_model, tmp_path)
        assert report.row("-5dB/all").n == 3

    def test_missing_corpus(self, tiny_model, tmp_path):
        with pytest.raises(FileNotFoundError):
            metrics.evaluate_corpus(tiny_model, tmp_path / "missing")
