"""Differentiable primitives.

Binary ops follow numpy broadcasting; the backward pass sums gradients back
over broadcast axes. ``log`` clamps its argument at ``LOG_FLOOR`` so hard
one-hot targets never produce ``-inf``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record

LOG_FLOOR = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return record("div", out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    return record("scale", a.data * a.dtype.type(c), (a,), lambda g, n: (g * c,))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g, n: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g, n: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, LOG_FLOOR)``; zero gradient below the floor."""
    floor = a.dtype.type(LOG_FLOOR)
    safe = np.maximum(a.data, floor)

    def vjp(g, needs):
        return (np.where(a.data > floor, g / safe, 0).astype(a.dtype),)

    return record("log", np.log(safe), (a,), vjp)


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g, n: (2 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g, n: (g / (2 * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g, n: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g, n: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def vjp(g, needs):
        return (g * (s * (1 + a.data * (1 - s))),)

    return record("silu", a.data * s, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return record("clip", np.clip(a.data, lo, hi), (a,), lambda g, n: (g * inside,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = sum(a, axis=axis, keepdims=keepdims)
    n = a.size // max(out.size, 1)
    return scale(out, 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    tensors = tuple(as_tensor(t, like=ref) for t in tensors)
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"cannot concat shapes {ref.shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat`; one output tensor per entry of ``sizes``."""
    if np.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    outs = []
    start = 0
    ax = axis % a.ndim
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + size)
        index = tuple(index)

        def vjp(g, needs, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        outs.append(record("split", a.data[index].copy(), (a,), vjp))
        start += size
    return outs


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")

    def vjp(g, needs):
        return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)

    return record("matmul", a.data @ b.data, (a, b), vjp)


def softmax(logits: Tensor, axis: int = 0) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if logits.shape[axis] < 2:
        raise ShapeError(f"softmax needs at least 2 channels on axis {axis}, got {logits.shape}")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (logits,), vjp)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Repeat each of the trailing three (spatial) axes ``factor`` times."""
    *lead, d, h, w = a.shape
    f = factor
    expanded = a.data.reshape(*lead, d, 1, h, 1, w, 1)
    out = np.broadcast_to(expanded, (*lead, d, f, h, f, w, f)).reshape(*lead, d * f, h * f, w * f)

    def vjp(g, needs):
        n = len(lead)
        g = g.reshape(*lead, d, f, h, f, w, f)
        return (g.sum(axis=(n + 1, n + 3, n + 5)),)

    return record("upsample", np.ascontiguousarray(out), (a,), vjp)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the three spatial axes."""
    axes = (-3, -2, -1)
    centered = x - mean(x, axis=axes, keepdims=True)
    var = mean(square(centered), axis=axes, keepdims=True)
    return centered / sqrt(var + eps)
