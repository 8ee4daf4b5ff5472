"""Forward and backward kernels for every layer type.

All kernels take and return channels-first arrays ``(N, C, D, H, W)``. Each
convolution is evaluated tap by tap: for every kernel offset the strided input
slice is contracted against the ``(C_out, C_in)`` weight slice with one BLAS
matmul. Forward functions never mutate their inputs; backward functions take
the forward inputs explicitly instead of hidden caches.
"""
from __future__ import annotations

from itertools import product

import math

import numpy as np


def triple(v) -> tuple[int, int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v!r}")
        return tuple(int(a) for a in v)
    return (int(v),) * 3


def conv_out_extent(n: int, k: int, stride: int = 1, padding: int = 0) -> int:
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be nonnegative, got {padding}")
    out = (n + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(f"non-positive output extent: in={n} k={k} stride={stride} pad={padding}")
    return out


def convtranspose_out_extent(n: int, k: int, stride: int = 1) -> int:
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    return (n - 1) * stride + k


def _check5(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 5:
        raise ValueError(f"{name} must be 5-D (N, C, D, H, W), got shape {x.shape}")


def _pad(x: np.ndarray, pad: tuple[int, int, int]) -> np.ndarray:
    if pad == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))


def _unpad(x: np.ndarray, pad: tuple[int, int, int]) -> np.ndarray:
    pd, ph, pw = pad
    D, H, W = x.shape[2:]
    return x[:, :, pd:D - pd, ph:H - ph, pw:W - pw]


def _window(o: tuple[int, int, int], out: tuple[int, ...], stride: tuple[int, int, int]):
    return tuple(slice(o[a], o[a] + stride[a] * (out[a] - 1) + 1, stride[a]) for a in range(3))


def _taps_first(w: np.ndarray, transpose: bool = False) -> np.ndarray:
    """``(A, B, kd, kh, kw)`` -> contiguous ``(kd, kh, kw, A, B)`` (or ``(..., B, A)``)."""
    axes = (2, 3, 4, 1, 0) if transpose else (2, 3, 4, 0, 1)
    return np.ascontiguousarray(w.transpose(axes))


def _taps_last(wt: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(wt.transpose(3, 4, 0, 1, 2))


def _geometry(x_shape, kshape, stride, padding):
    stride = triple(stride)
    pad = triple(padding)
    out = tuple(conv_out_extent(x_shape[2 + a], kshape[a], stride[a], pad[a]) for a in range(3))
    return stride, pad, out


# ---------------------------------------------------------------- standard conv

def conv3d(x: np.ndarray, w: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Cross-correlate ``x`` with ``w`` of shape ``(C_out, C_in, kd, kh, kw)``; no bias."""
    _check5(x)
    if w.ndim != 5:
        raise ValueError(f"weight must be (C_out, C_in, kd, kh, kw), got {w.shape}")
    N, C = x.shape[:2]
    G = w.shape[0]
    if w.shape[1] != C:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {w.shape[1]}")
    stride, pad, out = _geometry(x.shape, w.shape[2:], stride, padding)
    xt = _pad(x, pad).transpose(1, 0, 2, 3, 4)
    wt = _taps_first(w)
    acc = np.zeros((G, N * out[0] * out[1] * out[2]), dtype=np.result_type(x, w))
    for o in product(*(range(k) for k in w.shape[2:])):
        patch = xt[(slice(None), slice(None)) + _window(o, out, stride)]
        acc += wt[o] @ patch.reshape(C, -1)
    return np.ascontiguousarray(acc.reshape((G, N) + out).transpose(1, 0, 2, 3, 4))


def conv3d_backward(gout: np.ndarray, x: np.ndarray, w: np.ndarray, stride=1, padding=0):
    """Return ``(grad_input, grad_weight)``."""
    N, C = x.shape[:2]
    G = w.shape[0]
    stride, pad, out = _geometry(x.shape, w.shape[2:], stride, padding)
    if gout.shape != (N, G) + out:
        raise ValueError(f"upstream gradient shape {gout.shape} != {(N, G) + out}")
    xt = _pad(x, pad).transpose(1, 0, 2, 3, 4)
    gt = gout.transpose(1, 0, 2, 3, 4).reshape(G, -1)
    gxt = np.zeros(xt.shape, dtype=np.result_type(x, w, gout))
    wt = _taps_first(w, transpose=True)
    gwt = np.zeros(w.shape[2:] + w.shape[:2], dtype=gxt.dtype)
    for o in product(*(range(k) for k in w.shape[2:])):
        sl = (slice(None), slice(None)) + _window(o, out, stride)
        gwt[o] = gt @ xt[sl].reshape(C, -1).T
        gxt[sl] += (wt[o] @ gt).reshape((C, N) + out)
    gx = _unpad(gxt.transpose(1, 0, 2, 3, 4), pad)
    return np.ascontiguousarray(gx), _taps_last(gwt)


# --------------------------------------------------------------- depthwise conv

def _channel_groups(n: int, c: int, out) -> list[slice]:
    # one channel at a time keeps large slabs cache resident; tiny grids batch all channels
    if n * math.prod(out) >= 4096:
        return [slice(i, i + 1) for i in range(c)]
    return [slice(0, c)]


def depthwise3d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                stride=1, padding=0) -> np.ndarray:
    """Per-channel convolution, ``w`` of shape ``(C, kd, kh, kw)``."""
    _check5(x)
    N, C = x.shape[:2]
    if w.ndim != 4 or w.shape[0] != C:
        raise ValueError(f"channel mismatch: input has {C} channels, depthwise kernel is {w.shape}")
    stride, pad, out = _geometry(x.shape, w.shape[1:], stride, padding)
    xp = _pad(x, pad)
    y = np.zeros(x.shape[:2] + out, dtype=np.result_type(x, w))
    taps = [(o, (slice(None), slice(None)) + _window(o, out, stride))
            for o in product(*(range(k) for k in w.shape[1:]))]
    for g in _channel_groups(N, C, out):
        yc, xc = y[:, g], xp[:, g]
        wc = w[g][None, :, :, :, :, None, None, None]
        tmp = np.empty_like(yc)
        for o, sl in taps:
            np.multiply(xc[sl], wc[(slice(None), slice(None)) + o], out=tmp)
            yc += tmp
    if bias is not None:
        y += bias[None, :, None, None, None]
    return y


def depthwise3d_backward(gout, x, w, stride=1, padding=0):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    N, C = x.shape[:2]
    stride, pad, out = _geometry(x.shape, w.shape[1:], stride, padding)
    xp = _pad(x, pad)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, w, gout))
    gw = np.zeros(w.shape, dtype=gxp.dtype)
    taps = [(o, (slice(None), slice(None)) + _window(o, out, stride))
            for o in product(*(range(k) for k in w.shape[1:]))]
    for g in _channel_groups(N, C, out):
        gc, xc, gxc = gout[:, g], xp[:, g], gxp[:, g]
        wc = w[g][None, :, :, :, :, None, None, None]
        tmp = np.empty(gc.shape, dtype=gxp.dtype)
        for o, sl in taps:
            np.multiply(gc, xc[sl], out=tmp)
            gw[(g,) + o] = tmp.sum(axis=(0, 2, 3, 4))
            np.multiply(gc, wc[(slice(None), slice(None)) + o], out=tmp)
            gxc[sl] += tmp
    gb = gout.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(_unpad(gxp, pad)), gw, gb


# --------------------------------------------------------------- pointwise conv

def pointwise(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """1x1x1 convolution with ``w`` of shape ``(C_out, C_in)``."""
    _check5(x)
    N, C = x.shape[:2]
    if w.ndim != 2 or w.shape[1] != C:
        raise ValueError(f"channel mismatch: input has {C} channels, pointwise kernel is {w.shape}")
    xt = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    y = w @ xt
    if bias is not None:
        y += bias[:, None]
    return np.ascontiguousarray(y.reshape((w.shape[0], N) + x.shape[2:]).transpose(1, 0, 2, 3, 4))


def pointwise_backward(gout, x, w):
    N, C = x.shape[:2]
    G = w.shape[0]
    xt = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    gt = gout.transpose(1, 0, 2, 3, 4).reshape(G, -1)
    gw = gt @ xt.T
    gx = (w.T @ gt).reshape((C, N) + x.shape[2:]).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(gx), gw, gt.sum(axis=1)


# ------------------------------------------------------------- transposed conv

def _tiles(inn, k, stride) -> bool:
    """True when the kernel footprints of neighbouring input voxels never overlap."""
    return all(k[a] == stride[a] or inn[a] == 1 for a in range(3))


def conv_transpose3d(x: np.ndarray, w: np.ndarray, stride=1) -> np.ndarray:
    """Adjoint of :func:`conv3d` (zero padding); ``w`` is ``(C_in, C_out, kd, kh, kw)``."""
    _check5(x)
    N, C = x.shape[:2]
    if w.ndim != 5 or w.shape[0] != C:
        raise ValueError(f"channel mismatch: input has {C} channels, kernel is {w.shape}")
    stride = triple(stride)
    inn = x.shape[2:]
    out = tuple(convtranspose_out_extent(inn[a], w.shape[2 + a], stride[a]) for a in range(3))
    G = w.shape[1]
    xt = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    if _tiles(inn, w.shape[2:], stride):
        (D, H, W), (kd, kh, kw) = inn, w.shape[2:]
        cols = (w.reshape(C, -1).T @ xt).reshape(G, kd, kh, kw, N, D, H, W)
        return np.ascontiguousarray(cols.transpose(4, 0, 5, 1, 6, 2, 7, 3)).reshape((N, G) + out)
    wt = _taps_first(w, transpose=True)
    yt = np.zeros((G, N) + out, dtype=np.result_type(x, w))
    for o in product(*(range(k) for k in w.shape[2:])):
        sl = (slice(None), slice(None)) + _window(o, inn, stride)
        yt[sl] += (wt[o] @ xt).reshape((G, N) + inn)
    return np.ascontiguousarray(yt.transpose(1, 0, 2, 3, 4))


def conv_transpose3d_backward(gout, x, w, stride=1):
    N, C = x.shape[:2]
    G = w.shape[1]
    stride = triple(stride)
    inn = x.shape[2:]
    xt = x.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    if _tiles(inn, w.shape[2:], stride):
        (D, H, W), (kd, kh, kw) = inn, w.shape[2:]
        gcols = gout.reshape(N, G, D, kd, H, kh, W, kw).transpose(1, 3, 5, 7, 0, 2, 4, 6)
        gcols = gcols.reshape(G * kd * kh * kw, -1)
        gw = (xt @ gcols.T).reshape(w.shape)
        gx = (w.reshape(C, -1) @ gcols).reshape((C, N) + inn).transpose(1, 0, 2, 3, 4)
        return np.ascontiguousarray(gx), gw
    gt = gout.transpose(1, 0, 2, 3, 4)
    gxt = np.zeros((C, N * inn[0] * inn[1] * inn[2]), dtype=np.result_type(x, w, gout))
    wt = _taps_first(w)
    gwt = np.zeros(w.shape[2:] + w.shape[:2], dtype=gxt.dtype)
    for o in product(*(range(k) for k in w.shape[2:])):
        sl = (slice(None), slice(None)) + _window(o, inn, stride)
        g = gt[sl].reshape(G, -1)
        gwt[o] = xt @ g.T
        gxt += wt[o] @ g
    gx = gxt.reshape((C, N) + inn).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(gx), _taps_last(gwt)


# ------------------------------------------------------------------ batch norm

def batchnorm(x: np.ndarray, gamma, beta, mean, var, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Normalize channels of ``x`` with the given statistics. Returns ``(y, x_hat)``."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    return xhat * gamma.reshape(shape) + beta.reshape(shape), xhat


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // x.shape[1]
    if count < 2:
        raise ValueError("batch norm in training mode needs more than one value per channel")
    return x.mean(axis=axes), x.var(axis=axes), count


def batchnorm_backward(gout, xhat, gamma, var, eps: float = 1e-5, training: bool = True):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    axes = (0,) + tuple(range(2, gout.ndim))
    shape = (1, -1) + (1,) * (gout.ndim - 2)
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape)
    ggamma = np.sum(gout * xhat, axis=axes)
    gbeta = gout.sum(axis=axes)
    dxhat = gout * gamma.reshape(shape)
    if not training:
        return dxhat * inv, ggamma, gbeta
    m = gout.size // gout.shape[1]
    s1 = dxhat.sum(axis=axes).reshape(shape)
    s2 = np.sum(dxhat * xhat, axis=axes).reshape(shape)
    return (inv / m) * (m * dxhat - s1 - xhat * s2), ggamma, gbeta


# ------------------------------------------------------------ simple layers

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(gout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return gout * (x > 0)


def maxpool3d(x: np.ndarray, window=2, stride=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel window maximum. Returns ``(y, argmax)``; ties go to the first offset."""
    _check5(x)
    window = triple(window)
    stride = triple(window if stride is None else stride)
    out = tuple(conv_out_extent(x.shape[2 + a], window[a], stride[a]) for a in range(3))
    y = None
    arg = np.zeros(x.shape[:2] + out, dtype=np.int32)
    for idx, o in enumerate(product(*(range(k) for k in window))):
        cand = x[(slice(None), slice(None)) + _window(o, out, stride)]
        if y is None:
            y = cand.copy()
            continue
        better = cand > y
        y = np.where(better, cand, y)
        arg[better] = idx
    return y, arg


def maxpool3d_backward(gout, arg, x_shape, window=2, stride=None) -> np.ndarray:
    window = triple(window)
    stride = triple(window if stride is None else stride)
    out = gout.shape[2:]
    gx = np.zeros(x_shape, dtype=gout.dtype)
    for idx, o in enumerate(product(*(range(k) for k in window))):
        gx[(slice(None), slice(None)) + _window(o, out, stride)] += np.where(arg == idx, gout, 0)
    return gx


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` with ``w`` of shape ``(in, out)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"fully_connected: cannot apply {w.shape} weights to input {x.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def fully_connected_backward(gout, x, w):
    return gout @ w.T, x.T @ gout, gout.sum(axis=0)


# ---------------------------------------------------------------------- losses

def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or inf")


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross entropy over the batch and its gradient w.r.t. ``logits``."""
    _check_finite(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {N}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(N), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(N), labels] -= 1.0
    return float(loss), grad / N


def voxel_bce(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Voxel-wise sigmoid cross entropy, averaged over every voxel."""
    _check_finite(logits, "logits")
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {logits.shape}")
    if np.any((target != 0) & (target != 1)):
        raise ValueError("voxel target must be binary")
    t = target.astype(logits.dtype)
    # log(1 + exp(-|z|)) keeps both branches finite
    loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - t) / logits.size
    return float(loss.mean()), grad


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
