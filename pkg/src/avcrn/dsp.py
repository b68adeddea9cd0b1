"""Waveform <-> log-Mel conversions, WAV I/O and SNR mixing.

All signals are mono float64 arrays at 16 kHz. Spectrograms are complex
arrays of shape ``(N_BINS, n_frames)``.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 640
HOP = 160
N_FFT = FRAME_LEN
N_BINS = N_FFT // 2 + 1
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-8
CHUNK_FRAMES = 20


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, ``w[k] = 0.5 (1 - cos(2 pi k / n))``."""
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def n_frames(n_samples: int) -> int:
    """Number of STFT frames for a signal of ``n_samples`` samples."""
    return -(-n_samples // HOP)


def _frame(x: np.ndarray) -> np.ndarray:
    n = len(x)
    t = n_frames(n)
    left = FRAME_LEN // 2
    right = (t - 1) * HOP + FRAME_LEN - left - n
    mode = "reflect" if n > 1 else "constant"
    padded = np.pad(x, (left, right), mode=mode)
    idx = np.arange(FRAME_LEN)[None, :] + HOP * np.arange(t)[:, None]
    return padded[idx]


def stft(x: np.ndarray) -> np.ndarray:
    """Short-time Fourier transform with centred reflection padding.

    Frame ``t`` is centred on sample ``t * HOP``, so a signal of ``n``
    samples yields exactly ``ceil(n / HOP)`` frames (200 ms -> 20 frames).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("stft expects a non-empty 1-D waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    frames = _frame(x) * hann_window(FRAME_LEN)
    return np.fft.rfft(frames, n=N_FFT, axis=1).T


def istft(spec: np.ndarray, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    ``length`` defaults to ``n_frames * HOP``; pass the original sample
    count to invert exactly.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != N_BINS:
        raise ValueError(f"expected spectrogram with {N_BINS} rows, got {spec.shape}")
    t = spec.shape[1]
    if length is None:
        length = t * HOP
    if n_frames(length) != t:
        raise ValueError(f"length {length} is inconsistent with {t} frames")
    win = hann_window(FRAME_LEN)
    frames = np.fft.irfft(spec.T, n=N_FFT, axis=1) * win
    total = (t - 1) * HOP + FRAME_LEN
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        out[i * HOP:i * HOP + FRAME_LEN] += frames[i]
        norm[i * HOP:i * HOP + FRAME_LEN] += win ** 2
    start = FRAME_LEN // 2
    out = out[start:start + length]
    norm = norm[start:start + length]
    if np.any(norm < 1e-10):
        raise FloatingPointError("window normalisation vanishes inside the output range")
    return out / norm


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """80 unit-peak triangular filters on the HTK Mel scale, 0-8 kHz.

    Returns an ``(80, 321)`` matrix mapping STFT magnitudes to Mel bands.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    freqs = np.arange(N_BINS) * SAMPLE_RATE / N_FFT
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB = mel_filterbank()
_FB_PINV = np.linalg.pinv(_FB)


def log_mel(spec: np.ndarray) -> np.ndarray:
    """``log(fb @ |spec| + 1e-8)``, shape ``(80, n_frames)``."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != N_BINS:
        raise ValueError(f"expected spectrogram with {N_BINS} rows, got {spec.shape}")
    return np.log(_FB @ np.abs(spec) + LOG_FLOOR)


def chunk(mel: np.ndarray) -> list[np.ndarray]:
    """Split ``(80, T)`` into non-overlapping ``(80, 20)`` slices, dropping the tail."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[0] != N_MELS:
        raise ValueError(f"expected ({N_MELS}, T) log-Mel matrix, got {mel.shape}")
    k = mel.shape[1] // CHUNK_FRAMES
    return [mel[:, i * CHUNK_FRAMES:(i + 1) * CHUNK_FRAMES] for i in range(k)]


def mel_pseudo_inverse(mel: np.ndarray, phase: np.ndarray, length: int | None = None) -> np.ndarray:
    """Approximate waveform from a log-Mel matrix and a phase-donor spectrogram.

    The linear magnitude is ``max(0, pinv(fb) @ exp(mel))``; the phase is
    taken from ``phase`` (typically the noisy mixture's STFT).
    """
    mel = np.asarray(mel, dtype=np.float64)
    phase = np.asarray(phase)
    if mel.ndim != 2 or mel.shape[0] != N_MELS:
        raise ValueError(f"expected ({N_MELS}, T) log-Mel matrix, got {mel.shape}")
    if phase.ndim != 2 or phase.shape[0] != N_BINS:
        raise ValueError(f"expected phase spectrogram with {N_BINS} rows, got {phase.shape}")
    if phase.shape[1] != mel.shape[1]:
        raise ValueError(
            f"frame count mismatch: log-Mel has {mel.shape[1]}, phase has {phase.shape[1]}")
    mag = np.maximum(0.0, _FB_PINV @ (np.exp(mel) - LOG_FLOOR))
    return istft(mag * np.exp(1j * np.angle(phase)), length)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float,
               rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Add ``noise`` to ``clean`` scaled so that the mixture has ``snr_db``.

    A window of ``len(clean)`` samples is cropped from ``noise`` at an
    offset drawn from ``rng``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    if len(noise) < len(clean):
        raise ValueError(f"noise ({len(noise)} samples) shorter than clean ({len(clean)})")
    rng = np.random.default_rng(rng)
    offset = int(rng.integers(0, len(noise) - len(clean) + 1))
    noise = noise[offset:offset + len(clean)]
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise ValueError("SNR undefined for silent clean or noise signal")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


def read_wav(path: str | Path) -> np.ndarray:
    """Read a 16-bit mono 16 kHz PCM WAV file into float64 samples in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if f.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
            if channels != 1:
                raise ValueError(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise ValueError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | Path, x: np.ndarray) -> None:
    """Write samples as 16-bit mono 16 kHz PCM, clipping to the representable range."""
    x = np.asarray(x, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
