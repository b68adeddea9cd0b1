"""Audio-visual convolution-recurrent enhancement network.

Audio encoder (strided convs over frequency) and visual encoder (per-level
projections of the face embeddings) run side by side. At every level the two
maps are fused by a 1x1 convolution; the fused maps become the decoder's skip
connections, optionally gated by a :class:`~avcrn.sta.StaUnit`. The deepest
audio and visual maps are flattened per time step and passed through two
LSTM layers before the transposed-convolution decoder rebuilds an 80x20
log-Mel chunk.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from . import tensor as T
from .nn import LSTM, Conv2d, ConvTranspose2d, Linear, Module
from .sta import StaUnit
from .tensor import Tensor

N_MELS = dsp.N_MELS
CHUNK = dsp.CHUNK_FRAMES
VIDEO_FRAMES = 5


@dataclass
class ModelConfig:
    enc_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    kernel: tuple[int, int] = (3, 3)
    freq_stride: int = 2
    lstm_hidden: int = 256
    lstm_layers: int = 2
    video_dim: int = 64
    sta_enabled: bool = True
    sta_reduction: int = 4
    sta_per_channel: bool = True
    residual: bool = True
    seed: int = 0

    def validate(self) -> None:
        if len(self.enc_channels) < 2 or any(c < 1 for c in self.enc_channels):
            raise ValueError(f"enc_channels needs >= 2 positive entries, got {self.enc_channels}")
        if N_MELS % self.freq_stride ** len(self.enc_channels):
            raise ValueError(
                f"{N_MELS} mel bands not divisible by stride {self.freq_stride} over "
                f"{len(self.enc_channels)} levels")
        if self.freq_stride != 2:
            raise ValueError("only frequency stride 2 is supported")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ValueError("kernel extents must be odd")
        if self.lstm_hidden < 1 or self.lstm_layers < 1 or self.video_dim < 1 or self.sta_reduction < 1:
            raise ValueError("lstm_hidden, lstm_layers, video_dim and sta_reduction must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "kernel" in d:
            d["kernel"] = tuple(d["kernel"])
        if "enc_channels" in d:
            d["enc_channels"] = [int(c) for c in d["enc_channels"]]
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @property
    def level_freqs(self) -> list[int]:
        return [N_MELS // self.freq_stride ** (i + 1) for i in range(len(self.enc_channels))]


def _to_maps(x: Tensor, b: int, steps: int, c: int, f: int) -> Tensor:
    """``[B*T, C*F]`` -> ``[B, C, F, T]``."""
    return T.transpose(T.reshape(x, (b, steps, c, f)), (0, 2, 3, 1))


def _to_sequence(x: Tensor) -> Tensor:
    """``[B, C, F, T]`` -> ``[B, T, C*F]``."""
    b, c, f, steps = x.shape
    return T.reshape(T.transpose(x, (0, 3, 1, 2)), (b, steps, c * f))


class AVCRN(Module):
    def __init__(self, config: ModelConfig | None = None):
        config = config or ModelConfig()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        chans, freqs = config.enc_channels, config.level_freqs
        kf, kt = config.kernel
        pad = (kf // 2, kt // 2)
        stride = (config.freq_stride, 1)

        self.enc = [Conv2d(c_in, c, config.kernel, rng, stride=stride, pad=pad)
                    for c_in, c in zip([1] + chans[:-1], chans)]
        self.vproj = [Linear(config.video_dim, c * f, rng) for c, f in zip(chans, freqs)]
        self.fuse = [Conv2d(2 * c, c, (1, 1), rng) for c in chans]

        flat = chans[-1] * freqs[-1]
        sizes = [2 * flat] + [config.lstm_hidden] * config.lstm_layers
        self.lstm = [LSTM(n_in, n_out, rng) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
        self.proj = Linear(config.lstm_hidden, flat, rng)

        self.sta = ([StaUnit(c, rng, config.sta_reduction, config.sta_per_channel) for c in chans]
                    if config.sta_enabled else [])
        # Decoder level i consumes skip j = L-1-i and restores encoder j's input geometry.
        up_kernel = (2 * config.freq_stride, kt)
        up_pad = ((up_kernel[0] - config.freq_stride) // 2, kt // 2)
        self.dec = []
        c_prev = chans[-1]
        for j in reversed(range(len(chans))):
            c_out = chans[j - 1] if j > 0 else chans[0]
            self.dec.append(ConvTranspose2d(c_prev + chans[j], c_out, up_kernel, rng,
                                            stride=stride, pad=up_pad))
            c_prev = c_out
        self.out = Conv2d(chans[0], 1, (1, 1), rng)

        self.norm_mean = np.zeros(N_MELS)
        self.norm_std = np.ones(N_MELS)

    # -- components --------------------------------------------------------

    def audio_encoder(self, x: Tensor) -> list[Tensor]:
        """``[B, 1, 80, 20]`` -> per-level maps ``[B, C_l, 80 / 2^l, 20]``."""
        if x.ndim != 4 or x.shape[1:] != (1, N_MELS, CHUNK):
            raise ValueError(f"audio_encoder expects [B, 1, {N_MELS}, {CHUNK}], got {x.shape}")
        maps = []
        h = x
        for conv in self.enc:
            h = T.elu(conv(h))
            maps.append(h)
        return maps

    def video_encoder(self, v: Tensor) -> list[Tensor]:
        """``[B, 5, D]`` -> per-level maps shaped like the audio maps."""
        d = self.config.video_dim
        if v.ndim != 3 or v.shape[1:] != (VIDEO_FRAMES, d):
            raise ValueError(f"video_encoder expects [B, {VIDEO_FRAMES}, {d}], got {v.shape}")
        b = v.shape[0]
        up = T.reshape(T.repeat(v, CHUNK // VIDEO_FRAMES, axis=1), (b * CHUNK, d))
        return [_to_maps(lin(up), b, CHUNK, c, f)
                for lin, c, f in zip(self.vproj, self.config.enc_channels, self.config.level_freqs)]

    def fuse_layer(self, level: int, a: Tensor, v: Tensor) -> Tensor:
        if a.shape != v.shape:
            raise ValueError(f"fuse_layer: audio {a.shape} and visual {v.shape} maps differ")
        return T.elu(self.fuse[level](T.concat_channels(a, v)))

    def bottleneck(self, a: Tensor, v: Tensor) -> Tensor:
        if a.shape != v.shape:
            raise ValueError(f"bottleneck: audio {a.shape} and visual {v.shape} maps differ")
        b, c, f, steps = a.shape
        h = T.concat_last(_to_sequence(a), _to_sequence(v))
        for layer in self.lstm:
            h = layer(h)
        h = self.proj(T.reshape(h, (b * steps, self.config.lstm_hidden)))
        return _to_maps(h, b, steps, c, f)

    def decoder(self, h: Tensor, skips: list[Tensor]) -> Tensor:
        """``skips`` ordered deep -> shallow; returns ``[B, 1, 80, 20]``."""
        if len(skips) != len(self.dec):
            raise ValueError(f"decoder expects {len(self.dec)} skips, got {len(skips)}")
        for i, (up, skip) in enumerate(zip(self.dec, skips)):
            if skip.shape[0] != h.shape[0] or skip.shape[2:] != h.shape[2:]:
                raise ValueError(f"decoder level {i}: skip {skip.shape} does not match {h.shape}")
            if self.sta:
                skip = self.sta[len(self.dec) - 1 - i](skip)
            h = T.elu(up(T.concat_channels(h, skip)))
        return self.out(h)

    # -- full network ------------------------------------------------------

    def net(self, noisy: Tensor, video: Tensor) -> Tensor:
        """Normalised log-Mel ``[B, 80, 20]`` + video ``[B, 5, D]`` -> normalised prediction."""
        if noisy.ndim != 3 or noisy.shape[1:] != (N_MELS, CHUNK):
            raise ValueError(f"expected noisy chunks [B, {N_MELS}, {CHUNK}], got {noisy.shape}")
        if video.shape[0] != noisy.shape[0]:
            raise ValueError(f"batch mismatch: {noisy.shape[0]} audio vs {video.shape[0]} video")
        b = noisy.shape[0]
        x = T.reshape(noisy, (b, 1, N_MELS, CHUNK))
        audio = self.audio_encoder(x)
        visual = self.video_encoder(video)
        fused = [self.fuse_layer(i, a, v) for i, (a, v) in enumerate(zip(audio, visual))]
        h = self.bottleneck(audio[-1], visual[-1])
        y = T.reshape(self.decoder(h, fused[::-1]), (b, N_MELS, CHUNK))
        return T.add(y, noisy) if self.config.residual else y

    def normalize(self, logmel: np.ndarray) -> np.ndarray:
        return (logmel - self.norm_mean[:, None]) / self.norm_std[:, None]

    def denormalize(self, logmel: np.ndarray) -> np.ndarray:
        return logmel * self.norm_std[:, None] + self.norm_mean[:, None]

    def forward(self, noisy, video) -> np.ndarray:
        """Noisy log-Mel chunks ``[B, 80, 20]`` -> predicted clean log-Mel chunks."""
        dtype = self.enc[0].weight.dtype
        noisy = np.asarray(noisy.data if isinstance(noisy, Tensor) else noisy, dtype=np.float64)
        video = np.asarray(video.data if isinstance(video, Tensor) else video)
        with T.no_grad():
            y = self.net(Tensor(self.normalize(noisy).astype(dtype)), Tensor(video.astype(dtype)))
        return self.denormalize(y.data.astype(np.float64))


def model_forward(model: AVCRN, noisy, video) -> np.ndarray:
    return model.forward(noisy, video)
