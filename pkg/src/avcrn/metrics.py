"""Objective scores: classic STOI and SI-SDR, plus corpus-level reporting."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from .datagen import AvExample, load_split
from .model import AVCRN
from .train import enhance_waveform

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, 384 ms at 10 kHz
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
SISDR_CAP_DB = 100.0
_EPS = np.finfo(np.float64).eps


def third_octave_matrix() -> np.ndarray:
    """``(15, 257)`` 0/1 matrix summing FFT bins into 1/3-octave bands from 150 Hz."""
    freqs = np.linspace(0, STOI_FS, STOI_NFFT + 1)[:STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS, dtype=np.float64)
    lower = STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    upper = STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((STOI_BANDS, len(freqs)))
    for i in range(STOI_BANDS):
        lo = int(np.argmin(np.abs(freqs - lower[i])))
        hi = int(np.argmin(np.abs(freqs - upper[i])))
        obm[i, lo:hi] = 1.0
    return obm


_OBM = third_octave_matrix()


def _stoi_window() -> np.ndarray:
    # Symmetric Hann of length N + 2 with the zero endpoints dropped.
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _drop_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove frames where ``x`` is more than 40 dB below its loudest frame."""
    hop = STOI_FRAME // 2
    win = _stoi_window()
    starts = np.arange(0, len(x) - STOI_FRAME, hop)
    xf = np.stack([win * x[s:s + STOI_FRAME] for s in starts])
    yf = np.stack([win * y[s:s + STOI_FRAME] for s in starts])
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    x_out = np.zeros((n - 1) * hop + STOI_FRAME)
    y_out = np.zeros_like(x_out)
    for i in range(n):
        x_out[i * hop:i * hop + STOI_FRAME] += xf[i]
        y_out[i * hop:i * hop + STOI_FRAME] += yf[i]
    return x_out, y_out


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    hop = STOI_FRAME // 2
    win = _stoi_window()
    starts = range(0, len(x) - STOI_FRAME, hop)
    frames = np.stack([win * x[s:s + STOI_FRAME] for s in starts])
    spec = np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1)) ** 2
    return np.sqrt(_OBM @ spec.T)


def stoi(clean: np.ndarray, degraded: np.ndarray, fs: int = dsp.SAMPLE_RATE) -> float:
    """Classic short-time objective intelligibility of ``degraded`` against ``clean``."""
    x = np.asarray(clean, dtype=np.float64)
    y = np.asarray(degraded, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"stoi needs equal-length 1-D signals, got {x.shape} and {y.shape}")
    if len(x) < 0.384 * fs:
        raise ValueError("stoi needs at least 384 ms of signal")
    if fs != STOI_FS:
        g = np.gcd(int(fs), STOI_FS)
        x = resample_poly(x, STOI_FS // g, int(fs) // g)
        y = resample_poly(y, STOI_FS // g, int(fs) // g)
    x, y = _drop_silent_frames(x, y)
    xe, ye = _band_envelopes(x), _band_envelopes(y)
    n_frames = xe.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(
            f"only {n_frames} non-silent STOI frames, need {STOI_SEGMENT}")
    clip = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    total = 0.0
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = xe[:, m - STOI_SEGMENT:m]
        ys = ye[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(alpha * ys, clip * xs)
        yp = yp - yp.mean(axis=1, keepdims=True)
        xc = xs - xs.mean(axis=1, keepdims=True)
        corr = np.sum(xc * yp, axis=1) / (
            (np.linalg.norm(xc, axis=1) + _EPS) * (np.linalg.norm(yp, axis=1) + _EPS))
        total += corr.sum()
    return float(total / ((n_frames - STOI_SEGMENT + 1) * STOI_BANDS))


def si_sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB for a perfect estimate."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"si_sdr needs equal shapes, got {s.shape} and {e.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ValueError("si_sdr undefined for a silent reference")
    target = (float(e @ s) / ref_energy) * s
    err = float(np.sum((target - e) ** 2))
    tgt = float(target @ target)
    if err <= tgt * 10.0 ** (-SISDR_CAP_DB / 10.0):
        return SISDR_CAP_DB
    return float(10.0 * np.log10(tgt / err))


REPORT_HEADER = (
    "# Objective scores. Enhanced audio = predicted log-Mel, pseudo-inverse Mel\n"
    "# filterbank, noisy STFT phase. PESQ is not computed; SI-SDR (dB) stands in\n"
    "# as the quality measure.\n"
)
REPORT_COLUMNS = ("condition", "n", "stoi_noisy", "stoi_enh", "sisdr_noisy", "sisdr_enh")


@dataclass
class ReportRow:
    condition: str
    n: int
    stoi_noisy: float
    stoi_enh: float
    sisdr_noisy: float
    sisdr_enh: float


@dataclass
class Report:
    rows: list[ReportRow]

    def row(self, condition: str) -> ReportRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_table(self) -> str:
        width = max(len(r.condition) for r in self.rows) if self.rows else 9
        lines = [REPORT_HEADER.rstrip("\n"),
                 f"{REPORT_COLUMNS[0]:<{width}}  {'n':>4}" + "".join(f"  {c:>11}" for c in REPORT_COLUMNS[2:])]
        for r in self.rows:
            lines.append(f"{r.condition:<{width}}  {r.n:>4}  {r.stoi_noisy:11.4f}  {r.stoi_enh:11.4f}"
                         f"  {r.sisdr_noisy:11.3f}  {r.sisdr_enh:11.3f}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rows)


def snr_label(snr: float) -> str:
    return f"{snr:g}dB"


def score_example(model: AVCRN, ex: AvExample) -> tuple[float, float, float, float]:
    """``(stoi_noisy, stoi_enh, sisdr_noisy, sisdr_enh)`` for one utterance."""
    enhanced = enhance_waveform(model, ex.noisy, ex.video)
    return (stoi(ex.clean, ex.noisy), stoi(ex.clean, enhanced),
            si_sdr(ex.clean, ex.noisy), si_sdr(ex.clean, enhanced))


def evaluate_corpus(model: AVCRN, test_set: list[AvExample] | str | Path) -> Report:
    """Mean scores grouped by test SNR and noise family, plus one row per SNR.

    ``test_set`` is a list of examples or a corpus root whose ``test``
    split is loaded from disk. Rows are ordered by descending SNR, then
    family name, so the report is a pure function of model and corpus.
    """
    if not isinstance(test_set, list):
        test_set = load_split(test_set, "test")
    groups: dict[tuple[float, str], list[tuple[float, ...]]] = defaultdict(list)
    for ex in test_set:
        groups[(float(ex.snr_db), ex.noise_family)].append(score_example(model, ex))
    rows = []
    for snr in sorted({k[0] for k in groups}, reverse=True):
        pooled = []
        for fam in sorted(f for s, f in groups if s == snr):
            scores = groups[(snr, fam)]
            pooled += scores
            rows.append(_row(f"{snr_label(snr)}/{fam}", scores))
        rows.append(_row(f"{snr_label(snr)}/all", pooled))
    return Report(rows)


def _row(condition: str, scores: list[tuple[float, ...]]) -> ReportRow:
    m = np.mean(np.asarray(scores), axis=0)
    return ReportRow(condition, len(scores), *(float(v) for v in m))
