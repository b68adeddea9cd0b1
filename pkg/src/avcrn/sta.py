"""Soft-threshold attention gate for 4-D feature maps.

The gate learns a threshold per channel from the map itself::

    s     = mean(|X|) over the spatial axes
    alpha = sigmoid(fc2(relu(fc1(s))))
    tau   = alpha * s
    Y     = soft_threshold(X, tau)

Because ``0 < alpha < 1`` the threshold never exceeds the channel's mean
absolute activation, so the gate can silence weak (noise-like) responses
but never a whole channel of strong ones.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class StaUnit(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 per_channel: bool = True):
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        self.channels = channels
        self.reduction = reduction
        self.per_channel = per_channel
        width = max(1, channels // reduction)
        self.fc1 = Linear(channels, width, rng)
        self.fc2 = Linear(width, channels if per_channel else 1, rng)

    def zero_(self) -> "StaUnit":
        """Zero every fc weight and bias (alpha becomes exactly 0.5)."""
        for p in self.parameters():
            p.data[...] = 0.0
        return self

    def threshold(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(alpha, tau)``, each ``[B, C]`` (``[B, 1]`` in scalar mode)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"StaUnit expects [B, {self.channels}, F, T], got {x.shape}")
        s = T.global_avg_pool_abs(x)
        alpha = T.sigmoid(self.fc2(T.relu(self.fc1(s))))
        if not self.per_channel:
            # one threshold per item from the mean over channels
            s = T.reshape(T.linear(s, Tensor(np.full((1, self.channels), 1.0 / self.channels, dtype=s.dtype))),
                          (x.shape[0], 1))
        return alpha, T.mul(alpha, s)

    def forward(self, x: Tensor) -> Tensor:
        _, tau = self.threshold(x)
        return T.soft_threshold(x, tau)


def sta_forward(unit: StaUnit, x: Tensor) -> Tensor:
    return unit(x)


def sta_sparsity(y) -> float:
    """Fraction of exactly-zero entries."""
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    return float(np.count_nonzero(data == 0) / data.size) if data.size else 0.0
