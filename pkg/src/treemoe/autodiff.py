"""Dense float64 tensors with a reverse-mode differentiation tape.

Everything downstream (gates, experts, the cascade) is built from the ops in
this module. Ops compute eagerly on numpy arrays and, while a tape is active,
record a pull-back closure; ``backward`` replays the tape in reverse and
accumulates adjoints into ``Tensor.grad``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``data`` is the value (row-major numpy array), ``grad`` is lazily
    allocated and accumulates across backward calls until the caller resets
    it. ``tape`` points at the tape that recorded the producing op, if any.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("tensor must hold at least one element")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: "Tape" | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


PullFn = Callable[[np.ndarray, Callable[["Tensor", np.ndarray], None]], None]


class Tape:
    """Ordered record of ops for one forward computation."""

    def __init__(self):
        self._records: list[tuple[Tensor, PullFn]] = []

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``; adjoints add into ``grad`` fields."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        def accum(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
                holders[key] = t

        for out, pull in reversed(self._records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            pull(g, accum)
        for key, t in holders.items():
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + adjoint[key]


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def record(tape: Tape | None = None):
    """Context manager that makes ``tape`` (a fresh one by default) active."""
    global _ACTIVE_TAPE
    if tape is None:
        tape = Tape()
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> None:
    """Run the reverse sweep of the tape that produced ``loss``."""
    if loss.tape is None:
        raise ValueError("loss was not produced under an active tape")
    loss.tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], pull: PullFn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        out.tape = tape
        tape._records.append((out, pull))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def pull(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g, b.data.shape))

    return _emit(data, (a, b), pull)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def pull(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(-g, b.data.shape))

    return _emit(data, (a, b), pull)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def pull(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(data, (a, b), pull)


def scale(a, alpha: float) -> Tensor:
    a = _as_tensor(a)
    alpha = float(alpha)
    data = a.data * alpha

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * alpha)

    return _emit(data, (a,), pull)


def scale_add(a, b, alpha: float, beta: float) -> Tensor:
    """alpha*a + beta*b for same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"scale_add needs equal shapes, got {a.data.shape} and {b.data.shape}")
    alpha, beta = float(alpha), float(beta)
    data = alpha * a.data + beta * b.data

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * alpha)
        if b.requires_grad:
            accum(b, g * beta)

    return _emit(data, (a, b), pull)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style 1-D promotion.

    2-D x 2-D is the base case; a 1-D left operand acts as a row, a 1-D right
    operand as a column, and promoted axes are squeezed away again.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ValueError(
            f"matmul supports 1-D/2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D")
    ap = a.data[None, :] if a.data.ndim == 1 else a.data
    bp = b.data[:, None] if b.data.ndim == 1 else b.data
    if ap.shape[1] != bp.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    prod = ap @ bp
    data = prod
    if a.data.ndim == 1:
        data = data[0]
    if b.data.ndim == 1:
        data = data[..., 0]

    def pull(g, accum):
        g2 = g.reshape(prod.shape)
        if a.requires_grad:
            ga = g2 @ bp.T
            accum(a, ga[0] if a.data.ndim == 1 else ga)
        if b.requires_grad:
            gb = ap.T @ g2
            accum(b, gb[:, 0] if b.data.ndim == 1 else gb)

    return _emit(data, (a, b), pull)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.data.shape}")
    data = a.data.T

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g.T)

    return _emit(data, (a,), pull)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    src_shape = a.data.shape

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g.reshape(src_shape))

    return _emit(data, (a,), pull)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    if len(parts) == 0:
        raise ValueError("concat needs at least one input")
    ts = [_as_tensor(p) for p in parts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def pull(g, accum):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accum(t, g[tuple(sl)])

    return _emit(data, ts, pull)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    extent = a.data.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ValueError(
            f"narrow range [{start}, {start + length}) exceeds axis extent {extent}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl]

    def pull(g, accum):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            accum(a, full)

    return _emit(data, (a,), pull)


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())
    shape = a.data.shape

    def pull(g, accum):
        if a.requires_grad:
            accum(a, np.full(shape, g.reshape(())))

    return _emit(data, (a,), pull)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return scale(tensor_sum(a), 1.0 / a.data.size)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return mul(a, a)


# -------------------------------------------------------------- activations


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # derivative at exactly 0 is 0
    data = np.where(mask, a.data, 0.0)

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * mask)

    return _emit(data, (a,), pull)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = _sigmoid_raw(a.data)

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * data * (1.0 - data))

    return _emit(data, (a,), pull)


def log_sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = -np.logaddexp(0.0, -a.data)

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * _sigmoid_raw(-a.data))

    return _emit(data, (a,), pull)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * (1.0 - data * data))

    return _emit(data, (a,), pull)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def pull(g, accum):
        if a.requires_grad:
            accum(a, g * data)

    return _emit(data, (a,), pull)


def softmax(a) -> Tensor:
    """Softmax over the last axis (a vector, or rows of a batch)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def pull(g, accum):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            accum(a, data * (g - inner))

    return _emit(data, (a,), pull)


# ------------------------------------------------------------- convolution


def _conv_geometry(C: int, H: int, W: int, kH: int, kW: int, stride: int):
    OH = (H - kH) // stride + 1
    OW = (W - kW) // stride + 1
    c = np.repeat(np.arange(C), kH * kW)
    di = np.tile(np.repeat(np.arange(kH), kW), C)
    dj = np.tile(np.arange(kW), C * kH)
    oy = stride * np.repeat(np.arange(OH), OW)
    ox = stride * np.tile(np.arange(OW), OH)
    rows = di[:, None] + oy[None, :]
    cols = dj[:, None] + ox[None, :]
    idx = (c[:, None] * H + rows) * W + cols  # (C*kH*kW, OH*OW)
    return OH, OW, idx


def conv2d_strided(x, kernels, stride: int, bias) -> Tensor:
    """Valid (unpadded) strided 2-D convolution.

    Args:
        x: input of shape (C_in, H, W) or batched (N, C_in, H, W).
        kernels: (C_out, C_in, kH, kW).
        stride: positive step shared by both spatial axes.
        bias: (C_out,), added per output channel.

    Output spatial extent is floor((H-kH)/stride)+1 per axis. Implemented as a
    gather into window columns followed by one matmul; the backward pass
    scatters through the same index map.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if kernels.data.ndim != 4:
        raise ValueError(f"kernels must be 4-D (C_out, C_in, kH, kW), got shape {kernels.data.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise ValueError(f"input must be (C, H, W) or (N, C, H, W), got shape {x.data.shape}")
    xb = x.data if batched else x.data[None]
    N, C, H, W = xb.shape
    C_out, C_k, kH, kW = kernels.data.shape
    if C_k != C:
        raise ValueError(f"kernel expects {C_k} input channels, input has {C}")
    if kH > H or kW > W:
        raise ValueError(f"kernel {kH}x{kW} larger than input {H}x{W}")
    if bias.data.shape != (C_out,):
        raise ValueError(f"bias must have shape ({C_out},), got {bias.data.shape}")

    OH, OW, idx = _conv_geometry(C, H, W, kH, kW, stride)
    K = C * kH * kW
    cols = xb.reshape(N, C * H * W)[:, idx]          # (N, K, OH*OW)
    kmat = kernels.data.reshape(C_out, K)
    out = np.matmul(kmat, cols)                      # (N, C_out, OH*OW)
    out = out.reshape(N, C_out, OH, OW) + bias.data[None, :, None, None]
    data = out if batched else out[0]

    def pull(g, accum):
        gb = g if batched else g[None]
        g2 = gb.reshape(N, C_out, OH * OW)
        if bias.requires_grad:
            accum(bias, g2.sum(axis=(0, 2)))
        if kernels.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            accum(kernels, gk.reshape(C_out, C, kH, kW))
        if x.requires_grad:
            gcols = np.matmul(kmat.T, g2)            # (N, K, OH*OW)
            gx = np.zeros((N, C * H * W))
            np.add.at(gx, (np.arange(N)[:, None, None], idx[None]), gcols)
            gx = gx.reshape(N, C, H, W)
            accum(x, gx if batched else gx[0])

    return _emit(data, (x, kernels, bias), pull)


# -------------------------------------------------------------- parameters


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Fan-in-scaled uniform initializer: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / float(fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def adam_state(params: Sequence[Tensor]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected ADAM update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Convenience wrapper: reads ``grad`` fields, then clears them."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = adam_state(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state,
                  lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
