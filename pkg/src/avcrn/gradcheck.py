"""Central finite-difference verification of every differentiable op.

Relative error is measured over a vector of sampled gradient entries as
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
Inputs to the non-smooth ops (abs, relu, soft-threshold) are pushed at
least ``MARGIN`` away from their kinks so the difference quotient never
straddles one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import AVCRN, ModelConfig
from .sta import StaUnit
from .tensor import Tensor

STEP = 1e-5
MARGIN = 1e-3
OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(fn: Callable[[], Tensor], inputs: list[Tensor], rng: np.random.Generator | None = None,
          n_samples: int | None = None, step: float = STEP) -> float:
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    When ``n_samples`` is set, only that many randomly chosen entries
    (across all ``inputs``) are perturbed.
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    coords = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), n_samples, replace=False)
        coords = [coords[k] for k in pick]
    num, ana = [], []
    with T.no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            up = float(fn().data)
            flat[j] = orig - step
            down = float(fn().data)
            flat[j] = orig
            num.append((up - down) / (2 * step))
            ana.append(analytic[i].reshape(-1)[j])
    for x in inputs:
        x.grad = None
    return rel_error(np.array(ana), np.array(num))


def away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # A random linear functional makes every output entry matter.
    return T.sum(T.mul(y, Tensor(w)))


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Named closures, each returning the relative error of one op's gradient."""
    cases: dict[str, Callable[[], float]] = {}

    def unary(op, smooth=True):
        def run():
            x = _leaf(rng.standard_normal((3, 4)) if smooth else away_from_zero(rng, (3, 4)))
            w = rng.standard_normal((3, 4))
            return check(lambda: _weighted(op(x), w), [x])
        return run

    for name, op in [("neg", T.neg), ("sigmoid", T.sigmoid), ("tanh", T.tanh), ("elu", T.elu)]:
        cases[name] = unary(op)
    cases["abs"] = unary(T.abs, smooth=False)
    cases["relu"] = unary(T.relu, smooth=False)

    def binary(op):
        def run():
            a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))
            s = _leaf(rng.standard_normal(()))
            w = rng.standard_normal((3, 4))
            return max(check(lambda: _weighted(op(a, b), w), [a, b]),
                       check(lambda: _weighted(op(a, s), w), [a, s]))
        return run

    for name, op in [("add", T.add), ("sub", T.sub), ("mul", T.mul)]:
        cases[name] = binary(op)

    def linear():
        x, w_, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((2, 4))), _leaf(rng.standard_normal(2))
        w = rng.standard_normal((3, 2))
        return check(lambda: _weighted(T.linear(x, w_, b), w), [x, w_, b])
    cases["linear"] = linear

    def conv():
        x = _leaf(rng.standard_normal((2, 3, 8, 5)))
        k = _leaf(rng.standard_normal((4, 3, 3, 3)))
        b = _leaf(rng.standard_normal(4))
        errs = []
        for stride, pad in [((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (0, 1))]:
            out = T.conv2d(x, k, b, stride, pad)
            w = rng.standard_normal(out.shape)
            errs.append(check(lambda: _weighted(T.conv2d(x, k, b, stride, pad), w), [x, k, b]))
        return max(errs)
    cases["conv2d"] = conv

    def conv_t():
        y = _leaf(rng.standard_normal((2, 4, 4, 5)))
        k = _leaf(rng.standard_normal((4, 3, 4, 3)))
        b = _leaf(rng.standard_normal(3))
        out = T.conv2d_transpose(y, k, b, (2, 1), (1, 1))
        w = rng.standard_normal(out.shape)
        return check(lambda: _weighted(T.conv2d_transpose(y, k, b, (2, 1), (1, 1)), w), [y, k, b])
    cases["conv2d_transpose"] = conv_t

    def lstm():
        x = _leaf(rng.standard_normal((2, 4, 3)))
        wi = _leaf(0.5 * rng.standard_normal((20, 3)))
        u = _leaf(0.5 * rng.standard_normal((20, 5)))
        b = _leaf(0.5 * rng.standard_normal(20))
        w = rng.standard_normal((2, 4, 5))
        return check(lambda: _weighted(T.lstm_layer(x, wi, u, b), w), [x, wi, u, b])
    cases["lstm_layer"] = lstm

    def pool():
        x = _leaf(away_from_zero(rng, (2, 3, 4, 5)))
        w = rng.standard_normal((2, 3))
        return check(lambda: _weighted(T.global_avg_pool_abs(x), w), [x])
    cases["global_avg_pool_abs"] = pool

    def concat():
        a, b = _leaf(rng.standard_normal((2, 3, 4, 5))), _leaf(rng.standard_normal((2, 2, 4, 5)))
        w = rng.standard_normal((2, 5, 4, 5))
        return check(lambda: _weighted(T.concat_channels(a, b), w), [a, b])
    cases["concat_channels"] = concat

    def shaping():
        x = _leaf(rng.standard_normal((2, 3, 4)))
        w = rng.standard_normal((2, 12, 4))

        def f():
            y = T.repeat(T.transpose(x, (0, 2, 1)), 3, axis=1)
            return _weighted(T.reshape(y, (2, 12, 3)), w[:, :, :3])
        return check(f, [x])
    cases["reshape_transpose_repeat"] = shaping

    def soft():
        x = rng.standard_normal((2, 3, 4, 5))
        tau = _leaf(rng.uniform(0.1, 0.8, (2, 3)))
        # keep |x| at least MARGIN*10 from the threshold it is compared against
        gap = np.abs(np.abs(x) - tau.data[:, :, None, None])
        x = np.where(gap < 10 * MARGIN, x + np.sign(x) * 20 * MARGIN, x)
        xt = _leaf(x)
        w = rng.standard_normal(x.shape)
        return check(lambda: _weighted(T.soft_threshold(xt, tau), w), [xt, tau])
    cases["soft_threshold"] = soft

    def mse():
        p, t = _leaf(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
        return check(lambda: T.mse_loss(p, t), [p])
    cases["mse_loss"] = mse
    return cases


def sta_case(rng: np.random.Generator) -> float:
    """Gradient of a StaUnit w.r.t. its input and all fc parameters."""
    unit = StaUnit(4, rng)
    for p in unit.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5
    x = _leaf(away_from_zero(rng, (2, 4, 5, 3)))
    w = rng.standard_normal(x.shape)
    with T.no_grad():
        _, tau = unit.threshold(x)
    gap = np.abs(np.abs(x.data) - tau.data[:, :, None, None])
    if gap.min() < 10 * MARGIN:
        x.data = np.where(gap < 10 * MARGIN, x.data * 1.05, x.data)
    return check(lambda: _weighted(unit(x), w), [x] + unit.parameters())


TINY = dict(enc_channels=[4, 8], lstm_hidden=16, video_dim=8)


def model_case(rng: np.random.Generator, sta_enabled: bool = True, n_params: int = 20) -> float:
    """End-to-end gradient of the tiny network on 64-bit, sampling ``n_params`` entries."""
    model = AVCRN(ModelConfig(**TINY, sta_enabled=sta_enabled, seed=int(rng.integers(1 << 30))))
    x = Tensor(rng.standard_normal((2, 80, 20)))
    v = Tensor(rng.standard_normal((2, 5, 8)))
    target = Tensor(rng.standard_normal((2, 80, 20)))
    return check(lambda: T.mse_loss(model.net(x, v), target), model.parameters(), rng, n_params)


def run_suite(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    results = [GradResult(name, fn(), OP_TOL) for name, fn in op_cases(rng).items()]
    results.append(GradResult("sta_unit", sta_case(rng), OP_TOL))
    results.append(GradResult("model[sta]", model_case(rng, True), MODEL_TOL))
    results.append(GradResult("model[no-sta]", model_case(rng, False), MODEL_TOL))
    return results
