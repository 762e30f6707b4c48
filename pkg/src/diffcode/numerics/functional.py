"""Differentiable layers built on :mod:`diffcode.numerics.tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .tensor import Tensor, _make, as_tensor, exp, log, tabs, tsum


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``[N, C, H, W]`` with an ``[O, C/groups, kh, kw]`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ContractError(f"invalid pad={pad} / stride={stride}")
    if c != cg * groups or o % groups:
        raise DimensionError(f"channel mismatch: input {c}, kernel {kernel.shape}, groups {groups}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # windows: [N, C, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    k = kernel.data
    og = o // groups
    depthwise = groups == c == o
    if depthwise:
        return _depthwise(x, kernel, bias, xp, stride, pad, ho, wo)
    if groups == 1 and kh == kw == 1 and stride == 1 and pad == 0:
        return _pointwise(x, kernel, bias)
    if groups == 1:
        return _im2col(x, kernel, bias, xp, stride, pad, ho, wo)
    if groups == 1:
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cg, ho, wo, kh, kw)
        kg = k.reshape(groups, og, cg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", wg, kg, optimize=True).reshape(n, o, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        if groups == 1:
            dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            dwin = np.tensordot(g, k, axes=([1], [0]))  # [N, Ho, Wo, C, kh, kw]
            dwin = dwin.transpose(0, 3, 1, 2, 4, 5)
        else:
            gg = g.reshape(n, groups, og, ho, wo)
            dk = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(k.shape)
            dwin = np.einsum("ngohw,gocij->ngchwij", gg, kg, optimize=True).reshape(n, c, ho, wo, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [np.ascontiguousarray(dx), dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, fn, "conv2d")


def _depthwise(x, kernel, bias, xp, stride, pad, ho, wo):
    n, c, h, w = x.shape
    kh, kw = kernel.shape[2:]
    k = kernel.data[:, 0]

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[window(i, j)] * k[:, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        dk = np.zeros_like(kernel.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                dk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                dxp[sl] += g * k[:, i, j][None, :, None, None]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [np.ascontiguousarray(dx), dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, fn, "conv2d")


def _im2col(x, kernel, bias, xp, stride, pad, ho, wo):
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + span_h:stride, j:j + span_w:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    k2 = kernel.data.reshape(o, c * kh * kw)
    out = (k2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        dk = (g2 @ cols2.T).reshape(kernel.shape)
        dcols = (k2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, i, j]
        dxp = dxp.transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [np.ascontiguousarray(dx), dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, fn, "conv2d")


def _pointwise(x, kernel, bias):
    n, c, h, w = x.shape
    k = kernel.data[:, :, 0, 0]
    o = k.shape[0]
    x3 = x.data.reshape(n, c, h * w)
    out = np.matmul(k, x3)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def fn(g):
        g3 = g.reshape(n, o, h * w)
        dx = np.matmul(k.T, g3).reshape(x.shape)
        dk = np.einsum("nop,ncp->oc", g3, x3).reshape(kernel.shape)
        grads = [dx, dk]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return _make(out.reshape(n, o, h, w), parents, fn, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing feature axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, fn, "linear")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), fn, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), fn, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits, axis=1)
    picked = lp[np.arange(len(labels)), labels]
    return -(tsum(picked) * (1.0 / len(labels)))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss shapes differ: {a.shape} vs {b.shape}")
    return tabs(a - b).mean()


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), fn, "upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def channel_norm(x: Tensor, eps: float = 0.1) -> Tensor:
    """Normalise each pixel's channel vector to zero mean, unit variance.

    The floor ``eps`` keeps narrow layers smooth: with two channels the map is a
    soft sign of the channel difference whose width is ``sqrt(eps)``.
    """
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=1, keepdims=True)
    return d / ((var + eps) ** 0.5)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    return log(exp(x - m).sum(axis=axis, keepdims=True)) + m
