"""Deterministic synthetic audio-visual corpus.

Stand-ins for real recordings: harmonic "speech" with syllabic envelopes
and moving resonances, three noise families with disjoint train/test
parameter grids, and per-frame visual embeddings computed from the clean
signal only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

SR = dsp.SAMPLE_RATE
VIDEO_FPS = 25
VIDEO_FRAME = SR // VIDEO_FPS  # 640 samples, one STFT window
FRAMES_PER_SEGMENT = 5
N_VIDEO_FEATURES = 8
JITTER_STD = 0.05
# Trough level of the syllable envelope (-20 dB). Much deeper troughs let the
# STOI clipping step correlate unrelated noise with the clean envelope.
ENVELOPE_FLOOR = 0.1
VIDEO_MAGIC = b"AVF1"
VIDEO_VERSION = 1

# Train and test draw family parameters from disjoint grids so that test
# noise is unseen.
NOISE_FAMILIES = ("white", "pink", "babble")
NOISE_PARAMS = {
    "white": {"train": (0.0, 0.15, -0.15), "test": (0.3, -0.3)},
    "pink": {"train": (0.9, 1.0, 1.1), "test": (0.8, 1.2)},
    "babble": {"train": (3.0, 5.0, 7.0), "test": (4.0, 6.0)},
}


@dataclass
class SynthSpec:
    n_train: int = 500
    n_val: int = 60
    n_test: int = 30
    utterance_len: float = 1.0
    snr_train_range: tuple[float, float] = (-10.0, 10.0)
    snr_eval: tuple[float, ...] = (0.0, -5.0)
    noise_families: tuple[str, ...] = NOISE_FAMILIES
    video_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.utterance_len < 0.5:
            raise ValueError("utterance_len must be >= 0.5 s")
        lo, hi = self.snr_train_range
        if not lo <= hi:
            raise ValueError(f"snr_train_range not ordered: {self.snr_train_range}")
        if not self.snr_eval:
            raise ValueError("snr_eval must not be empty")
        unknown = set(self.noise_families) - set(NOISE_FAMILIES)
        if unknown or not self.noise_families:
            raise ValueError(f"unknown noise families: {sorted(unknown)}")
        if self.video_dim < 1:
            raise ValueError("video_dim must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SynthSpec keys: {sorted(extra)}")
        d = dict(d)
        for key in ("snr_train_range", "snr_eval", "noise_families"):
            if key in d:
                d[key] = tuple(d[key])
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class AvExample:
    clean: np.ndarray
    noisy: np.ndarray
    video: np.ndarray  # (n_segments, 5, D)
    snr_db: float
    noise_family: str
    noise_param: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _smooth_random(rng: np.random.Generator, n: int, n_knots: int) -> np.ndarray:
    """Random curve in [-1, 1] interpolated through ``n_knots`` points."""
    knots = rng.uniform(-1.0, 1.0, n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def syllable_envelope(rng: np.random.Generator, n: int) -> np.ndarray:
    """Sequence of raised-cosine syllable bumps at 2-6 Hz over a low floor."""
    rate = rng.uniform(2.0, 6.0)
    env = np.zeros(n)
    pos = -rng.uniform(0.0, 1.0 / rate) * SR
    while pos < n:
        dur = SR / rate * rng.uniform(0.7, 1.3)
        start, stop = int(max(pos, 0)), int(min(pos + dur, n))
        if stop > start:
            phase = (np.arange(start, stop) - pos) / dur
            env[start:stop] = np.maximum(env[start:stop],
                                         rng.uniform(0.5, 1.0) * np.sin(np.pi * phase) ** 2)
        pos += dur
    return ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * env


def _f0_track(rng: np.random.Generator, n: int) -> np.ndarray:
    f0 = rng.uniform(100.0, 220.0) * (1.0 + 0.2 * _smooth_random(rng, n, 4))
    return np.clip(f0, 80.0, 300.0)


def speech_f0(seed: int, length: float = 1.0) -> np.ndarray:
    """Per-sample F0 (Hz) of ``synth_speech(seed, length)``."""
    return _f0_track(np.random.default_rng(seed), int(round(length * SR)))


def synth_speech(seed: int, length: float = 1.0) -> np.ndarray:
    """Harmonic speech proxy, peak-normalised to 0.5."""
    if length < 0.5:
        raise ValueError("length must be >= 0.5 s")
    rng = np.random.default_rng(seed)
    n = int(round(length * SR))
    f0 = _f0_track(rng, n)
    phase = 2.0 * np.pi * np.cumsum(f0) / SR
    n_harm = int(rng.integers(6, 11))
    formants = [
        (rng.uniform(300.0, 900.0) * (1.0 + 0.15 * _smooth_random(rng, n, 5)), rng.uniform(80.0, 200.0)),
        (rng.uniform(900.0, 2500.0) * (1.0 + 0.15 * _smooth_random(rng, n, 5)), rng.uniform(100.0, 250.0)),
    ]
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = 0.05 / h + sum(1.0 / (1.0 + ((fh - fc) / bw) ** 2) for fc, bw in formants)
        amp = np.where(fh < 0.49 * SR, amp, 0.0)
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x *= syllable_envelope(rng, n)
    return 0.5 * x / np.max(np.abs(x))


def _coloured_noise(rng: np.random.Generator, n: int, exponent: float) -> np.ndarray:
    """Gaussian noise with power spectrum proportional to ``f ** -exponent``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SR)
    f[0] = f[1]
    spec *= f ** (-exponent / 2.0)
    x = np.fft.irfft(spec, n)
    return x / np.std(x)


def _babble(rng: np.random.Generator, n: int, n_voices: int) -> np.ndarray:
    """Cluster of amplitude-modulated harmonic tones."""
    t = np.arange(n) / SR
    x = np.zeros(n)
    for _ in range(n_voices):
        f0 = rng.uniform(100.0, 250.0)
        voice = sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
                    for h in range(1, 6))
        am = 0.5 * (1.0 + np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi)))
        x += am * voice
    return x / np.std(x)


def synth_noise(family: str, param: float, seed: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if family in ("white", "pink"):
        return _coloured_noise(rng, n, param)
    if family == "babble":
        return _babble(rng, n, int(param))
    raise ValueError(f"unknown noise family {family!r}")


def _projection(dim: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(0x5EED)
    proj = rng.standard_normal((N_VIDEO_FEATURES, dim)) / np.sqrt(N_VIDEO_FEATURES)
    bias = 0.1 * rng.standard_normal(dim)
    return proj, bias


def frame_features(clean: np.ndarray) -> np.ndarray:
    """Per-video-frame descriptors of the clean signal, shape ``(n_frames, 8)``.

    Columns: log energy, F0 estimate, envelope derivative and five
    band-energy fractions. All are zero for a silent frame.
    """
    n_video = dsp.n_frames(len(clean)) // dsp.CHUNK_FRAMES * FRAMES_PER_SEGMENT
    padded = np.zeros(n_video * VIDEO_FRAME)
    m = min(len(clean), len(padded))
    padded[:m] = clean[:m]
    frames = padded.reshape(n_video, VIDEO_FRAME)
    energy = np.mean(frames ** 2, axis=1)
    log_energy = np.log1p(energy / 1e-4) / 5.0
    rms = np.sqrt(energy)
    env_deriv = 10.0 * np.diff(rms, prepend=0.0)

    f0 = np.zeros(n_video)
    lo, hi = SR // 300, SR // 80
    for i, fr in enumerate(frames):
        if energy[i] < 1e-6:
            continue
        ac = np.correlate(fr, fr, mode="full")[VIDEO_FRAME - 1:]
        lag = lo + int(np.argmax(ac[lo:hi + 1]))
        if ac[lag] > 0.3 * ac[0]:
            f0[i] = SR / lag / 300.0

    spec = np.abs(np.fft.rfft(frames * dsp.hann_window(VIDEO_FRAME), axis=1)) ** 2
    freqs = np.fft.rfftfreq(VIDEO_FRAME, 1.0 / SR)
    edges = (0.0, 500.0, 1000.0, 2000.0, 4000.0, 8001.0)
    bands = np.stack([spec[:, (freqs >= a) & (freqs < b)].sum(axis=1)
                      for a, b in zip(edges[:-1], edges[1:])], axis=1)
    total = bands.sum(axis=1, keepdims=True)
    shape = np.divide(bands, total, out=np.zeros_like(bands), where=total > 1e-12)
    return np.column_stack([log_energy, f0, env_deriv, shape])


def synth_video(clean: np.ndarray, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Visual embeddings for ``clean``: shape ``(n_segments, 5, dim)``.

    One segment per 200 ms log-Mel chunk; each row is a fixed random
    projection of :func:`frame_features` plus N(0, 0.05^2) jitter.
    """
    feats = frame_features(np.asarray(clean, dtype=np.float64))
    proj, bias = _projection(dim)
    jitter = np.random.default_rng(seed).normal(0.0, JITTER_STD, (len(feats), dim))
    emb = feats @ proj + bias + jitter
    return emb.reshape(-1, FRAMES_PER_SEGMENT, dim)


def _child_seed(seed: int, split: str, index: int) -> int:
    tag = {"train": 1, "val": 2, "test": 3}[split]
    ss = np.random.SeedSequence([seed, tag, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _headroom(clean: np.ndarray, noisy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Joint gain keeps the mixture inside 16-bit range without changing its SNR.
    peak = np.max(np.abs(noisy))
    g = min(1.0, 0.9 / peak) if peak > 0 else 1.0
    return clean * g, noisy * g


def make_example(spec: SynthSpec, split: str, index: int, snr: float | None = None) -> AvExample:
    """Generate one example. ``snr`` overrides the random train SNR."""
    seed = _child_seed(spec.seed, split, index)
    rng = np.random.default_rng(seed)
    n = int(round(spec.utterance_len * SR))
    clean = synth_speech(int(rng.integers(2 ** 62)), spec.utterance_len)
    family = spec.noise_families[index % len(spec.noise_families)]
    grid = NOISE_PARAMS[family]["test" if split == "test" else "train"]
    param = float(grid[int(rng.integers(len(grid)))])
    noise = synth_noise(family, param, int(rng.integers(2 ** 62)), int(1.5 * n))
    if snr is None:
        snr = float(rng.uniform(*spec.snr_train_range))
    mix_seed = int(rng.integers(2 ** 62))
    noisy = dsp.mix_at_snr(clean, noise, snr, mix_seed)
    clean, noisy = _headroom(clean, noisy)
    video = synth_video(clean, spec.video_dim, int(rng.integers(2 ** 62)))
    return AvExample(clean=clean, noisy=noisy, video=video, snr_db=float(snr),
                     noise_family=family, noise_param=param, seed=seed)


def build_corpus(spec: SynthSpec) -> dict[str, list[AvExample]]:
    """Train/val at random SNRs; every test utterance at each evaluation SNR."""
    spec.validate()
    corpus = {
        "train": [make_example(spec, "train", i) for i in range(spec.n_train)],
        "val": [make_example(spec, "val", i) for i in range(spec.n_val)],
        "test": [],
    }
    for i in range(spec.n_test):
        for snr in spec.snr_eval:
            corpus["test"].append(make_example(spec, "test", i, snr=float(snr)))
    return corpus


def write_video(path: str | Path, video: np.ndarray) -> None:
    """Write ``(n_frames, D)`` (or segmented) embeddings as ``video.f32``.

    Layout: 4-byte magic ``AVF1``, uint32 version, uint32 n_frames,
    uint32 D (all little-endian), then row-major float32 values.
    """
    video = np.asarray(video, dtype="<f4")
    rows = video.reshape(-1, video.shape[-1])
    header = VIDEO_MAGIC + struct.pack("<III", VIDEO_VERSION, rows.shape[0], rows.shape[1])
    Path(path).write_bytes(header + rows.tobytes())


def read_video(path: str | Path) -> np.ndarray:
    """Read ``video.f32``; returns float64 ``(n_frames, D)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != VIDEO_MAGIC:
        raise ValueError(f"{path}: bad video feature header")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != VIDEO_VERSION:
        raise ValueError(f"{path}: unsupported video feature version {version}")
    if len(raw) != 16 + 4 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} floats, file is truncated or padded")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(n, d).astype(np.float64)


def save_corpus(corpus: dict[str, list[AvExample]], root: str | Path, spec: SynthSpec | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(asdict(spec), indent=2))
    for split, examples in corpus.items():
        for i, ex in enumerate(examples):
            d = root / split / f"{i:05d}"
            d.mkdir(parents=True, exist_ok=True)
            dsp.write_wav(d / "clean.wav", ex.clean)
            dsp.write_wav(d / "noisy.wav", ex.noisy)
            write_video(d / "video.f32", ex.video)
            meta = {"snr_db": ex.snr_db, "seed": ex.seed, "noise_family": ex.noise_family,
                    "noise_param": ex.noise_param}
            (d / "meta.json").write_text(json.dumps(meta))
    return root


def load_split(root: str | Path, split: str) -> list[AvExample]:
    """Load one split written by :func:`save_corpus`."""
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"corpus split directory not found: {base}")
    out = []
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        for name in ("clean.wav", "noisy.wav", "video.f32", "meta.json"):
            if not (d / name).is_file():
                raise FileNotFoundError(f"missing corpus file: {d / name}")
        meta = json.loads((d / "meta.json").read_text())
        video = read_video(d / "video.f32")
        out.append(AvExample(
            clean=dsp.read_wav(d / "clean.wav"),
            noisy=dsp.read_wav(d / "noisy.wav"),
            video=video.reshape(-1, FRAMES_PER_SEGMENT, video.shape[1]),
            snr_db=float(meta["snr_db"]),
            noise_family=meta["noise_family"],
            noise_param=float(meta.get("noise_param", 0.0)),
            seed=int(meta["seed"]),
            meta=meta,
        ))
    return out
