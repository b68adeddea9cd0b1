"""Training loop and waveform-level enhancement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint, write_atomic
from .datagen import AvExample, load_split
from .model import AVCRN, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    max_steps: int | None = None
    time_budget: float | None = None  # seconds
    patience: int = 10
    grad_clip_norm: float = 5.0
    seed: int = 0
    dtype: str = "float32"
    corpus: str | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        self.model.validate()


@dataclass
class ChunkSet:
    noisy: np.ndarray  # (N, 80, 20) log-Mel
    clean: np.ndarray
    video: np.ndarray  # (N, 5, D)

    def __len__(self) -> int:
        return len(self.noisy)


def example_chunks(ex: AvExample) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    noisy = dsp.chunk(dsp.log_mel(dsp.stft(ex.noisy)))
    clean = dsp.chunk(dsp.log_mel(dsp.stft(ex.clean)))
    if len(ex.video) != len(clean):
        raise ValueError(f"video has {len(ex.video)} segments but audio has {len(clean)} chunks")
    return noisy, clean, ex.video


def make_chunks(examples: list[AvExample]) -> ChunkSet:
    noisy, clean, video = [], [], []
    for ex in examples:
        n, c, v = example_chunks(ex)
        noisy += n
        clean += c
        video.append(v)
    return ChunkSet(np.stack(noisy), np.stack(clean), np.concatenate(video))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_val: float
    trace: list[tuple[int, float]]
    val_trace: list[tuple[int, float]]
    final_model: AVCRN
    final_val: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate_loss(model: AVCRN, data: ChunkSet, batch_size: int = 64) -> float:
    dtype = model.enc[0].weight.dtype
    total = 0.0
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            x = model.normalize(data.noisy[i:i + batch_size]).astype(dtype)
            y = model.normalize(data.clean[i:i + batch_size]).astype(dtype)
            pred = model.net(Tensor(x), Tensor(data.video[i:i + batch_size].astype(dtype)))
            total += float(np.sum((pred.data.astype(np.float64) - y) ** 2))
    return total / data.noisy.size


def write_trace(path: Path, trace: list[tuple[int, float]]) -> None:
    text = "".join(f"{step} {loss!r}\n" for step, loss in trace)
    write_atomic(path, text.encode("utf-8"))


def train(cfg: TrainConfig, train_set: ChunkSet | None = None, val_set: ChunkSet | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Minimise MSE between predicted and clean normalised log-Mel chunks.

    Data comes from ``cfg.corpus`` unless chunk sets are passed in. When
    ``out_dir`` is given, ``best.ckpt`` is rewritten atomically after every
    validation improvement and ``loss_trace.txt`` after every epoch.
    """
    cfg.validate()
    if train_set is None or val_set is None:
        if cfg.corpus is None:
            raise ValueError("no corpus given")
        train_set = make_chunks(load_split(cfg.corpus, "train"))
        val_set = make_chunks(load_split(cfg.corpus, "val"))
    out = Path(out_dir) if out_dir is not None else None

    model = AVCRN(cfg.model).astype(np.dtype(cfg.dtype))
    frames = train_set.noisy.transpose(1, 0, 2).reshape(dsp.N_MELS, -1)
    model.norm_mean = frames.mean(axis=1)
    model.norm_std = np.maximum(frames.std(axis=1), 1e-3)
    dtype = np.dtype(cfg.dtype)
    xs = model.normalize(train_set.noisy).astype(dtype)
    ys = model.normalize(train_set.clean).astype(dtype)
    vs = train_set.video.astype(dtype)

    names = [n for n, _ in model.named_parameters()]
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace: list[tuple[int, float]] = []
    val_trace: list[tuple[int, float]] = []
    best_val, best_ckpt, stale, step = np.inf, None, 0, 0
    start = time.monotonic()
    stop = False
    for epoch in range(cfg.max_epochs):
        for idx in _batches(len(xs), cfg.batch_size, rng):
            opt.zero_grad()
            loss = T.mse_loss(model.net(Tensor(xs[idx]), Tensor(vs[idx])), Tensor(ys[idx]))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}")
            loss.backward()
            T.clip_grad_norm(opt.params, cfg.grad_clip_norm)
            opt.step()
            step += 1
            trace.append((step, value))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
            if cfg.time_budget is not None and time.monotonic() - start > cfg.time_budget:
                stop = True
                break
        val = evaluate_loss(model, val_set)
        val_trace.append((step, val))
        log.info("epoch %d step %d train %.4f val %.4f", epoch, step,
                 np.mean([v for _, v in trace[-50:]]), val)
        if val < best_val:
            best_val, stale = val, 0
            best_ckpt = Checkpoint(
                _snapshot(model), step=step, adam_t=opt.t,
                adam_m={n: m.copy() for n, m in zip(names, opt.m)},
                adam_v={n: v.copy() for n, v in zip(names, opt.v)},
                rng_state=rng.bit_generator.state,
                extra={"epoch": epoch, "val_loss": val, "train_seed": cfg.seed})
            if out is not None:
                write_atomic(out / "best.ckpt", save_checkpoint(best_ckpt))
        else:
            stale += 1
        if out is not None:
            write_trace(out / "loss_trace.txt", trace)
            write_trace(out / "val_trace.txt", val_trace)
        if stop or stale >= cfg.patience:
            break
    return TrainResult(best_ckpt, best_val, trace, val_trace, model, val_trace[-1][1])


def _snapshot(model: AVCRN) -> AVCRN:
    copy = AVCRN(model.config)
    for (_, dst), (_, src) in zip(copy.named_parameters(), model.named_parameters()):
        dst.data = src.data.copy()
    copy.norm_mean = model.norm_mean.copy()
    copy.norm_std = model.norm_std.copy()
    return copy


def enhance_waveform(model: AVCRN, noisy: np.ndarray, video: np.ndarray) -> np.ndarray:
    """Enhance a noisy waveform given its per-frame video embeddings.

    ``video`` is ``(n_frames, D)`` or ``(n_segments, 5, D)``. Complete
    200 ms chunks are replaced by the model's prediction; the trailing
    partial chunk keeps the noisy log-Mel. Output has the input's length.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    spec = dsp.stft(noisy)
    mel = dsp.log_mel(spec)
    n_chunks = mel.shape[1] // dsp.CHUNK_FRAMES
    d = model.config.video_dim
    video = np.asarray(video, dtype=np.float64).reshape(-1, d)
    expected = n_chunks * 5
    if video.shape[0] != expected:
        raise ValueError(f"video has {video.shape[0]} frames, expected {expected} for {len(noisy)} samples")
    if n_chunks:
        chunks = np.stack(dsp.chunk(mel))
        pred = model.forward(chunks, video.reshape(n_chunks, 5, d))
        mel = mel.copy()
        mel[:, :n_chunks * dsp.CHUNK_FRAMES] = pred.transpose(1, 0, 2).reshape(dsp.N_MELS, -1)
    out = dsp.mel_pseudo_inverse(mel, spec, len(noisy))
    covered = n_chunks * dsp.CHUNK_FRAMES * dsp.HOP
    out[covered:] = noisy[covered:]
    return out
