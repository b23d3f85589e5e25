"""3D convolution (cross-correlation) with cubic kernels.

Stride 1 uses a flat-shift formulation: the padded input is flattened to
``(C, N*Dp*Hp*Wp)`` and every kernel tap becomes a constant offset into that
buffer, so the forward pass is one GEMM followed by ``k**3`` shifted adds.
Other strides fall back to im2col. :func:`conv3d_reference` is the direct
loop both paths are tested against.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, record


def _check(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int, padding: int):
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [C,D,H,W] or [N,C,D,H,W], got {x.shape}")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"conv3d kernels must be [C_out,C_in,k,k,k], got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernels {w.shape} expect {w.shape[1]}"
        )
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv3d kernel size must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias shape {b.shape} does not match {w.shape[0]} output channels")
    if any(n + 2 * padding < k for n in x.shape[2:]):
        raise ShapeError(f"input {x.shape} too small for kernel {k} with padding {padding}")


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _offsets(k: int, hp: int, wp: int) -> list[int]:
    return [i * hp * wp + j * wp + l for i in range(k) for j in range(k) for l in range(k)]


def _conv_flat(x, w, padding):
    n, c, d, h, wd = x.shape
    o, _, k, _, _ = w.shape
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    dp, hp, wp = d + 2 * p, h + 2 * p, wd + 2 * p
    xf = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    length = xf.shape[1]
    offs = _offsets(k, hp, wp)
    lo = length - offs[-1]
    wstack = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(k**3 * o, c)
    y = (wstack @ xf).reshape(k**3, o, length)
    acc = y[0, :, :lo].copy()
    for t in range(1, k**3):
        acc += y[t, :, offs[t]:offs[t] + lo]
    full = np.zeros((o, length), dtype=x.dtype)
    full[:, :lo] = acc
    od, oh, ow = dp - k + 1, hp - k + 1, wp - k + 1
    out = full.reshape(o, n, dp, hp, wp)[:, :, :od, :oh, :ow].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out), (xf, (dp, hp, wp), offs, lo)


def _conv_flat_vjp(g, x_shape, w, cache, needs_x, needs_w):
    xf, (dp, hp, wp), offs, lo = cache
    n, c, d, h, wd = x_shape
    o, _, k, _, _ = w.shape
    od, oh, ow = g.shape[2:]
    length = xf.shape[1]
    gfull = np.zeros((o, n, dp, hp, wp), dtype=g.dtype)
    gfull[:, :, :od, :oh, :ow] = g.transpose(1, 0, 2, 3, 4)
    gfull = gfull.reshape(o, length)
    # Row t of the stack holds the output gradient shifted by tap t.
    stacked = np.zeros((k**3, o, length), dtype=g.dtype)
    for t, off in enumerate(offs):
        stacked[t, :, off:off + lo] = gfull[:, :lo]
    stacked = stacked.reshape(k**3 * o, length)
    gw = gx = None
    if needs_w:
        gw = (stacked @ xf.T).reshape(k, k, k, o, c).transpose(3, 4, 0, 1, 2)
        gw = np.ascontiguousarray(gw)
    if needs_x:
        wstack = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(k**3 * o, c)
        gxp = (wstack.T @ stacked).reshape(c, n, dp, hp, wp).transpose(1, 0, 2, 3, 4)
        p = (dp - d) // 2
        gx = np.ascontiguousarray(gxp[:, :, p:p + d, p:p + h, p:p + wd])
    return gx, gw


def _im2col(xp, k, stride, od, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, k, n, od, oh, ow), dtype=xp.dtype)
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = xp[:, :, i:i + s * od:s, j:j + s * oh:s, l:l + s * ow:s]
                cols[:, i, j, l] = patch.transpose(1, 0, 2, 3, 4)
    return cols.reshape(c * k**3, n * od * oh * ow)


def _conv_cols(x, w, stride, padding):
    n, c, d, h, wd = x.shape
    o, _, k, _, _ = w.shape
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    od, oh, ow = (_out_size(m, k, stride, p) for m in (d, h, wd))
    cols = _im2col(xp, k, stride, od, oh, ow)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, od, oh, ow).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out), (cols, xp.shape)


def _conv_cols_vjp(g, x_shape, w, cache, stride, padding, needs_x, needs_w):
    cols, xp_shape = cache
    n, c, d, h, wd = x_shape
    o, _, k, _, _ = w.shape
    od, oh, ow = g.shape[2:]
    g2 = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    gw = gx = None
    if needs_w:
        gw = (g2 @ cols.T).reshape(w.shape)
    if needs_x:
        gcols = (w.reshape(o, -1).T @ g2).reshape(c, k, k, k, n, od, oh, ow)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        s = stride
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, :, i:i + s * od:s, j:j + s * oh:s, l:l + s * ow:s] += (
                        gcols[:, i, j, l].transpose(1, 0, 2, 3, 4)
                    )
        p = padding
        gx = np.ascontiguousarray(gxp[:, :, p:p + d, p:p + h, p:p + wd])
    return gx, gw


def conv3d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlate ``x`` with ``kernels``.

    Parameters
    ----------
    x : Tensor
        ``[C_in, D, H, W]`` or batched ``[N, C_in, D, H, W]``.
    kernels : Tensor
        ``[C_out, C_in, k, k, k]`` with ``k`` odd.
    bias : Tensor, optional
        ``[C_out]``.
    stride : int
    padding : int, optional
        Defaults to ``(k - 1) // 2``.

    Returns
    -------
    Tensor
        Spatial size ``floor((n + 2*padding - k) / stride) + 1`` per axis.
    """
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    wd = kernels.data
    bd = None if bias is None else bias.data
    k = wd.shape[2] if wd.ndim == 5 else 0
    if padding is None:
        padding = (k - 1) // 2
    _check(xd, wd, bd, stride, padding)
    if stride == 1:
        out, cache = _conv_flat(xd, wd, padding)
    else:
        out, cache = _conv_cols(xd, wd, stride, padding)
    if bd is not None:
        out += bd.reshape(1, -1, 1, 1, 1)
    if unbatched:
        out = out[0]

    def vjp(g, needs):
        g5 = g[None] if unbatched else g
        if stride == 1:
            gx, gw = _conv_flat_vjp(g5, xd.shape, wd, cache, needs[0], needs[1])
        else:
            gx, gw = _conv_cols_vjp(g5, xd.shape, wd, cache, stride, padding, needs[0], needs[1])
        if gx is not None and unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)) if needs[2] else None)
        return tuple(grads)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("conv3d", out, inputs, vjp)


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None,
                     stride: int = 1, padding: Optional[int] = None) -> np.ndarray:
    """Direct nested-loop convolution on plain arrays (unbatched)."""
    c, d, h, wd = x.shape
    o, _, k, _, _ = w.shape
    p = (k - 1) // 2 if padding is None else padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    od, oh, ow = (_out_size(m, k, stride, p) for m in (d, h, wd))
    out = np.zeros((o, od, oh, ow), dtype=x.dtype)
    for z in range(od):
        for y in range(oh):
            for q in range(ow):
                patch = xp[:, z * stride:z * stride + k, y * stride:y * stride + k,
                           q * stride:q * stride + k]
                out[:, z, y, q] = np.tensordot(w, patch, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
    if b is not None:
        out += b.reshape(-1, 1, 1, 1)
    return out
