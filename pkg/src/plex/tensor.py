"""Dense tensors over numpy with a replayable reverse-mode tape.

Gradients are only recorded while a ``Tape`` is active, so inference code
(rollouts, evaluation) runs as plain numpy. Leaf tensors created with
``requires_grad=True`` accumulate into ``.grad`` when ``backward`` replays the
tape in exact reverse recording order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tape:
    """Ordered record of operations; backward replays it reversed."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self._records: list[tuple["Tensor", Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None

    def record(self, out: "Tensor", fn: Callable[[], None]) -> None:
        self._records.append((out, fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        # Intermediates are outputs of recorded ops; clearing them makes each
        # replay a fresh pass while leaf grads keep accumulating.
        for out, _ in self._records:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for _, fn in reversed(self._records):
            fn()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def apply_op(out_data: Array, *pairs) -> Tensor:
    """Build the op result and record its vjp closures on the active tape.

    ``pairs`` are ``(input_tensor, vjp)`` where ``vjp`` maps the output
    gradient to a gradient array of exactly the input's shape.
    """
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is None:
        return out
    live = tuple((t, vjp) for t, vjp in pairs if t.requires_grad)
    if not live:
        return out
    out.requires_grad = True

    def _step(out=out, live=live):
        g = out.grad
        if g is None:
            return
        for t, vjp in live:
            c = vjp(g)
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += c

    tape.record(out, _step)
    return out


def _unbroadcast(g: Array, shape) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    return apply_op(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    return apply_op(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    return apply_op(
        out,
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data
    return apply_op(
        out,
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    )


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return apply_op(out, (a, lambda g: g * p * a.data ** (p - 1)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a, lambda g: g * out))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a, lambda g: g * (1.0 - out * out)))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return apply_op(out, (a, lambda g: g * (a.data > 0)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GPT-2 style tanh approximation of GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return apply_op(out, (a, vjp))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full_like(a.data, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.data.shape)

    return apply_op(out, (a, vjp))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return apply_op(out, (a, lambda g: g.reshape(a.data.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return apply_op(out, (a, lambda g: g.transpose(inv)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return apply_op(out, (a, lambda g: _unbroadcast(g, a.data.shape)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return apply_op(out, *[(t, make_vjp(i)) for i, t in enumerate(tensors)])


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return apply_op(out, *[(t, make_vjp(i)) for i, t in enumerate(tensors)])


def getitem(a: Tensor, key) -> Tensor:
    """Basic (non-repeating) indexing: ints, slices, ellipsis."""
    out = a.data[key]

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        return buf

    return apply_op(out, (a, vjp))


def take_rows(table: Tensor, idx: Array) -> Tensor:
    """Gather rows of a 2D table by an integer index array (embedding lookup)."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return buf

    return apply_op(out, (table, vjp))


def masked_fill(a: Tensor, mask: Array, value: float) -> Tensor:
    """Where ``mask`` is False, replace entries with ``value`` (no gradient there)."""
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, np.asarray(value, dtype=a.dtype))
    return apply_op(out, (a, lambda g: np.where(m, g, 0.0)))


# ---------------------------------------------------------------------------
# linear algebra and fused numeric ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)

    return apply_op(out, (a, vjp_a), (b, vjp_b))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax received non-finite input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return apply_op(out, (a, vjp))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit (biased) variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm requires eps > 0")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gamma.data * xhat + beta.data

    def vjp_x(g):
        gg = g * gamma.data
        return inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))

    def vjp_gamma(g):
        return _unbroadcast(g * xhat, gamma.data.shape)

    def vjp_beta(g):
        return _unbroadcast(g, beta.data.shape)

    return apply_op(out, (a, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta))


def sum_sq_error(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over all elements of (pred - target)^2."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"sum_sq_error shapes differ: {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return sum_(mul(d, d))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW layout, square kernel.

    Forward/backward are im2col-based; all heavy lifting is numpy matmul.
    """
    n, c, h, wdt = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def vjp_x(g):
        gc = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dcols = (gc @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            return dxp[:, :, padding : padding + h, padding : padding + wdt]
        return dxp

    def vjp_w(g):
        gc = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        return (gc.T @ cols).reshape(w.data.shape)

    pairs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return apply_op(out, *pairs)


# ---------------------------------------------------------------------------
# gradient flow control and verification
# ---------------------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to ``x``."""
    return Tensor(x.data)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Seed the scalar loss and replay the tape in reverse recording order."""
    tp = tape or Tape.active()
    if tp is None:
        raise ContractError("backward requires an active or explicit Tape")
    tp.backward(loss)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Compare autograd gradients of ``f(params)`` against central differences.

    Returns the worst relative error ``|fd - ag| / max(|fd|, floor)`` over the
    checked coordinates. ``sample`` limits the number of coordinates checked
    per parameter (seeded via ``rng``); by default every coordinate is checked.
    ``f`` must be deterministic; run it in double precision for tight bounds.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(params)
        backward(loss, tape)
    autos = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, auto in zip(params, autos):
        flat = p.data.reshape(-1)
        aflat = auto.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data.reshape(()))
            flat[i] = orig - eps
            fm = float(f(params).data.reshape(()))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(fd - aflat[i]) / max(abs(fd), floor)
            if err > worst:
                worst = err
    return worst
