"""A small dense tensor with reverse-mode automatic differentiation.

Only the operators the enhancement network needs are provided. Each op
computes its value with numpy and, when any input requires a gradient,
records a closure that pushes the output gradient back to its inputs.
Broadcasting is limited to scalars and the per-channel threshold of
:func:`soft_threshold`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar ``loss``; gradients accumulate on leaves.

    Intermediate gradients and the recorded graph are released afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# elementwise

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a))
        _accum(b, _unbroadcast(g, b))
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a))
        _accum(b, _unbroadcast(-g, b))
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a))
        _accum(b, _unbroadcast(g * a.data, b))
    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # Subgradient 0 at x == 0.
    return _make(np.abs(a.data), (a,), lambda g: _accum(a, g * np.sign(a.data)), "abs")


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0), (a,), lambda g: _accum(a, g * (a.data > 0)), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: _accum(a, g * s * (1 - s)), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: _accum(a, g * (1 - t * t)), "tanh")


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0))
    y = np.where(x > 0, x, neg_part)
    return _make(y, (a,), lambda g: _accum(a, g * np.where(x > 0, 1.0, neg_part + 1.0)), "elu")


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _make(np.asarray(a.data.sum()), (a,), lambda g: _accum(a, np.broadcast_to(g, a.shape)), "sum")


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: _accum(a, g.transpose(inv)), "transpose")


def repeat(a: Tensor, k: int, axis: int) -> Tensor:
    """Repeat each element ``k`` times along ``axis`` (nearest-neighbour upsampling)."""
    def bw(g):
        shape = list(a.shape)
        shape.insert(axis + 1, k)
        _accum(a, g.reshape(shape).sum(axis=axis + 1))
    return _make(np.repeat(a.data, k, axis=axis), (a,), bw, "repeat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``[B, C1, F, T]`` and ``[B, C2, F, T]`` along channels."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    c1 = a.shape[1]

    def bw(g):
        _accum(a, g[:, :c1])
        _accum(b, g[:, c1:])
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw, "concat")


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_last: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[-1]

    def bw(g):
        _accum(a, g[..., :n])
        _accum(b, g[..., n:])
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bw, "concat_last")


# ---------------------------------------------------------------------------
# layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x: [B, in]``, ``w: [out, in]``, ``b: [out]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=0))
    return _make(y, parents, bw, "linear")


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _im2col(xp: np.ndarray, kf: int, kt: int, sf: int, st: int, fo: int, to: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kf, kt), axis=(2, 3))[:, :, :(fo - 1) * sf + 1:sf, :(to - 1) * st + 1:st]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * fo * to, c * kf * kt)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kf: int, kt: int, sf: int, st: int,
            fo: int, to: int) -> np.ndarray:
    # cols: [B, fo, to, C, kf, kt] -> padded image [B, C, Fp, Tp]
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kf):
        for j in range(kt):
            out[:, :, i:i + (fo - 1) * sf + 1:sf, j:j + (to - 1) * st + 1:st] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _crop(x: np.ndarray, pf: int, pt: int) -> np.ndarray:
    return x[:, :, pf:x.shape[2] - pf, pt:x.shape[3] - pt]


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x: [B, C_in, F, T]``, ``k: [C_out, C_in, kF, kT]`` -> ``[B, C_out, F', T']``
    with ``F' = (F + 2 pF - kF) // sF + 1``.
    """
    sf, st = _pair(stride)
    pf, pt = _pair(pad)
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d: kernel {k.shape} incompatible with input {x.shape}")
    bsz, cin, f, t = x.shape
    cout, _, kf, kt = k.shape
    if f + 2 * pf < kf or t + 2 * pt < kt:
        raise ValueError(f"conv2d: kernel {kf}x{kt} larger than padded input {f + 2 * pf}x{t + 2 * pt}")
    fo = (f + 2 * pf - kf) // sf + 1
    to = (t + 2 * pt - kt) // st + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if pf or pt else x.data
    cols = _im2col(xp, kf, kt, sf, st, fo, to)
    wm = k.data.reshape(cout, -1)
    y = cols @ wm.T
    if b is not None:
        y = y + b.data
    y = np.ascontiguousarray(y.reshape(bsz, fo, to, cout).transpose(0, 3, 1, 2))
    parents = (x, k) if b is None else (x, k, b)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if k.requires_grad:
            _accum(k, (gm.T @ cols).reshape(k.shape))
        if b is not None and b.requires_grad:
            _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wm).reshape(bsz, fo, to, cin, kf, kt)
            _accum(x, _crop(_col2im(dcols, xp.shape, kf, kt, sf, st, fo, to), pf, pt))
    return _make(y, parents, bw, "conv2d")


def conv2d_transpose(y: Tensor, k: Tensor, b: Tensor | None = None, stride=1, pad=0,
                     output_pad=0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel and geometry.

    ``y: [B, C_y, F, T]``, ``k: [C_y, C_out, kF, kT]`` (the kernel of the
    conv mapping ``C_out`` -> ``C_y``) gives ``[B, C_out, F', T']`` with
    ``F' = (F - 1) sF - 2 pF + kF + opF``.
    """
    sf, st = _pair(stride)
    pf, pt = _pair(pad)
    of, ot = _pair(output_pad)
    if y.ndim != 4 or k.ndim != 4 or y.shape[1] != k.shape[0]:
        raise ValueError(f"conv2d_transpose: kernel {k.shape} incompatible with input {y.shape}")
    bsz, cy, fi, ti = y.shape
    _, cout, kf, kt = k.shape
    fo = (fi - 1) * sf - 2 * pf + kf + of
    to = (ti - 1) * st - 2 * pt + kt + ot
    if fo < 1 or to < 1:
        raise ValueError("conv2d_transpose: padding leaves an empty output")
    padded = (bsz, cout, fo + 2 * pf, to + 2 * pt)
    km = k.data.reshape(cy, -1)
    ym = y.data.transpose(0, 2, 3, 1).reshape(-1, cy)
    cols = (ym @ km).reshape(bsz, fi, ti, cout, kf, kt)
    out = _crop(_col2im(cols, padded, kf, kt, sf, st, fi, ti), pf, pt)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (y, k) if b is None else (y, k, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if pf or pt else g
        gcols = _im2col(gp, kf, kt, sf, st, fi, ti)
        if k.requires_grad:
            _accum(k, (ym.T @ gcols).reshape(k.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if y.requires_grad:
            dy = (gcols @ km.T).reshape(bsz, fi, ti, cy).transpose(0, 3, 1, 2)
            _accum(y, dy)
    return _make(out, parents, bw, "conv2d_transpose")


def lstm_layer(x: Tensor, w: Tensor, u: Tensor, b: Tensor) -> Tensor:
    """Single-direction LSTM over ``x: [B, T, in]`` from a zero state.

    ``w: [4H, in]``, ``u: [4H, H]``, ``b: [4H]``; gate order is input,
    forget, cell, output. Returns hidden states ``[B, T, H]``.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"lstm_layer expects [B, T>=1, in], got {x.shape}")
    h4, n_in = w.shape
    hid = h4 // 4
    if h4 != 4 * hid or x.shape[2] != n_in or u.shape != (h4, hid) or b.shape != (h4,):
        raise ValueError(f"lstm_layer: inconsistent shapes x{x.shape} w{w.shape} u{u.shape} b{b.shape}")
    bsz, steps, _ = x.shape
    dt = np.result_type(x.data, w.data)
    xw = (x.data.reshape(-1, n_in) @ w.data.T + b.data).reshape(bsz, steps, h4)
    gates = np.empty((bsz, steps, h4), dtype=dt)
    cells = np.empty((bsz, steps, hid), dtype=dt)
    hs = np.empty((bsz, steps, hid), dtype=dt)
    h = np.zeros((bsz, hid), dtype=dt)
    c = np.zeros((bsz, hid), dtype=dt)
    for s in range(steps):
        z = xw[:, s] + h @ u.data.T
        ifo = _sigmoid(np.concatenate([z[:, :2 * hid], z[:, 3 * hid:]], axis=1))
        i, f, o = ifo[:, :hid], ifo[:, hid:2 * hid], ifo[:, 2 * hid:]
        gg = np.tanh(z[:, 2 * hid:3 * hid])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, s, :hid], gates[:, s, hid:2 * hid] = i, f
        gates[:, s, 2 * hid:3 * hid], gates[:, s, 3 * hid:] = gg, o
        cells[:, s] = c
        hs[:, s] = h

    def bw(gout):
        dz_all = np.empty_like(gates)
        dh_next = np.zeros((bsz, hid), dtype=dt)
        dc_next = np.zeros((bsz, hid), dtype=dt)
        du = np.zeros_like(u.data)
        for s in reversed(range(steps)):
            i, f = gates[:, s, :hid], gates[:, s, hid:2 * hid]
            gg, o = gates[:, s, 2 * hid:3 * hid], gates[:, s, 3 * hid:]
            c_prev = cells[:, s - 1] if s > 0 else np.zeros_like(dc_next)
            h_prev = hs[:, s - 1] if s > 0 else np.zeros_like(dh_next)
            tc = np.tanh(cells[:, s])
            dh = gout[:, s] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = dz_all[:, s]
            dz[:, :hid] = dc * gg * i * (1 - i)
            dz[:, hid:2 * hid] = dc * c_prev * f * (1 - f)
            dz[:, 2 * hid:3 * hid] = dc * i * (1 - gg * gg)
            dz[:, 3 * hid:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            du += dz.T @ h_prev
            dh_next = dz @ u.data
        flat = dz_all.reshape(-1, h4)
        _accum(u, du)
        _accum(w, flat.T @ x.data.reshape(-1, n_in))
        _accum(b, flat.sum(axis=0))
        _accum(x, (flat @ w.data).reshape(x.shape))
    return _make(hs, (x, w, u, b), bw, "lstm")


def global_avg_pool_abs(x: Tensor) -> Tensor:
    """Mean of ``|x|`` over the two spatial axes: ``[B, C, F, T] -> [B, C]``."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool_abs expects [B, C, F, T], got {x.shape}")
    n = x.shape[2] * x.shape[3]
    if n < 1:
        raise ValueError("global_avg_pool_abs: empty spatial extent")

    def bw(g):
        _accum(x, np.sign(x.data) * (g[:, :, None, None] / n))
    return _make(np.abs(x.data).mean(axis=(2, 3)), (x,), bw, "avg_pool_abs")


def soft_threshold(x: Tensor, tau: Tensor) -> Tensor:
    """Shrink ``x`` toward zero by ``tau``; values with ``|x| <= tau`` become 0.

    ``x`` is ``[B, C, F, T]`` (or any shape when ``tau`` is scalar); ``tau``
    is a scalar, ``[B]`` (one threshold per item) or ``[B, C]`` (per channel).
    """
    tau = _as_tensor(tau, x.dtype)
    if np.any(tau.data < 0):
        raise ValueError("soft_threshold: threshold must be non-negative")
    if tau.size == 1:
        t = tau.data.reshape(())
        reduce_axes: tuple[int, ...] = tuple(range(x.ndim))
    elif x.ndim == 4 and tau.shape == x.shape[:2]:
        t = tau.data[:, :, None, None]
        reduce_axes = (2, 3)
    elif x.ndim == 4 and tau.shape in ((x.shape[0],), (x.shape[0], 1)):
        t = tau.data.reshape(-1, 1, 1, 1)
        reduce_axes = (1, 2, 3)
    else:
        raise ValueError(f"soft_threshold: threshold shape {tau.shape} does not fit input {x.shape}")
    xd = x.data
    live = np.abs(xd) > t
    y = np.where(live, xd - np.sign(xd) * t, 0.0).astype(xd.dtype, copy=False)

    def bw(g):
        _accum(x, g * live)
        if tau.requires_grad:
            _accum(tau, (-g * np.sign(xd) * live).sum(axis=reduce_axes))
    return _make(y, (x, tau), bw, "soft_threshold")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        _accum(pred, g * 2.0 * diff / n)
        _accum(target, -g * 2.0 * diff / n)
    return _make(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse")


# ---------------------------------------------------------------------------
# optimisation

class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.m, self.v, self.t,
                  self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], m: list[np.ndarray],
              v: list[np.ndarray], t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update; ``t`` is the 1-based step count. ``None`` grads count as zero."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            g = np.zeros_like(p.data)
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p.data -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params])))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total
