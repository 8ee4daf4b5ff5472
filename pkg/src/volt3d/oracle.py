"""Brute-force reference kernels and numerical checkers.

Everything here is a literal nested-loop transcription of the convolution sums
over plain Python lists. Nothing is shared with :mod:`volt3d.ops`; the
reference exists to adjudicate it. Each routine refuses large shapes so it
cannot end up in a hot path.

Padding may be an int (symmetric) or ``"same"``, which pads ``(k-1)//2``
before and the remainder after so that the output extent equals the input
extent even for even ``k``. Padded positions hold literal zeros and their
multiplies are counted, matching the cost formulas.
"""
from __future__ import annotations

import math

import numpy as np

MAX_EXTENT = 8
MAX_CHANNELS = 8
MAX_BATCH = 4


class MacCounter:
    """Counts kernel multiplies. Not thread-safe; use one per run."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def _guard(x: np.ndarray, *channel_counts: int) -> None:
    n, c, *sp = x.shape
    if n > MAX_BATCH or c > MAX_CHANNELS or any(s > MAX_EXTENT for s in sp):
        raise ValueError(f"oracle refuses shape {x.shape}: limited to batch {MAX_BATCH}, "
                         f"{MAX_CHANNELS} channels, extent {MAX_EXTENT}")
    if any(cc > MAX_CHANNELS for cc in channel_counts):
        raise ValueError(f"oracle refuses more than {MAX_CHANNELS} channels")


def _pads(k: int, padding) -> tuple[int, int]:
    if padding == "same":
        lo = (k - 1) // 2
        return lo, k - 1 - lo
    return int(padding), int(padding)


def _padded(x, pads):
    """Zero-pad a (N, C, D, H, W) array into nested lists."""
    (d0, d1), (h0, h1), (w0, w1) = pads
    N, C, D, H, W = x.shape
    src = x.tolist()
    out = []
    for n in range(N):
        chans = []
        for c in range(C):
            vol = [[[0.0] * (W + w0 + w1) for _ in range(H + h0 + h1)] for _ in range(D + d0 + d1)]
            for z in range(D):
                for y in range(H):
                    row = vol[z + d0][y + h0]
                    srow = src[n][c][z][y]
                    for xx in range(W):
                        row[xx + w0] = srow[xx]
            chans.append(vol)
        out.append(chans)
    return out


def _extent(n, k, s, lo, hi):
    return (n + lo + hi - k) // s + 1


def naive_conv3d(x, w, stride=1, padding=0, counter: MacCounter | None = None) -> np.ndarray:
    """out[n, g, z, y, x] = sum_{m, i, j, l} w[g, m, i, j, l] * xpad[n, m, z*s+i, y*s+j, x*s+l]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _guard(x, w.shape[0])
    N, C, D, H, W = x.shape
    G, C2, kd, kh, kw = w.shape
    assert C2 == C, "channel mismatch"
    if isinstance(padding, (tuple, list)):
        pads = tuple((int(p), int(p)) for p in padding)
    else:
        pads = (_pads(kd, padding), _pads(kh, padding), _pads(kw, padding))
    s = stride
    Do = _extent(D, kd, s, *pads[0])
    Ho = _extent(H, kh, s, *pads[1])
    Wo = _extent(W, kw, s, *pads[2])
    xp = _padded(x, pads)
    K = w.tolist()
    out = np.zeros((N, G, Do, Ho, Wo))
    muls = 0
    for n in range(N):
        for g in range(G):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0
                        for m in range(C):
                            Kgm = K[g][m]
                            xm = xp[n][m]
                            for i in range(kd):
                                for j in range(kh):
                                    krow = Kgm[i][j]
                                    xrow = xm[z * s + i][y * s + j]
                                    x0 = xx * s
                                    for l in range(kw):
                                        acc += krow[l] * xrow[x0 + l]
                                    muls += kw
                        out[n, g, z, y, xx] = acc
    if counter is not None:
        counter.count += muls
    return out


def naive_depthwise(x, w, bias=None, stride=1, padding=0, counter: MacCounter | None = None) -> np.ndarray:
    """out[n, m, z, y, x] = b[m] + sum_{i, j, l} w[m, i, j, l] * xpad[n, m, ...]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _guard(x)
    N, C, D, H, W = x.shape
    C2, kd, kh, kw = w.shape
    assert C2 == C, "channel mismatch"
    pads = (_pads(kd, padding), _pads(kh, padding), _pads(kw, padding))
    s = stride
    Do = _extent(D, kd, s, *pads[0])
    Ho = _extent(H, kh, s, *pads[1])
    Wo = _extent(W, kw, s, *pads[2])
    xp = _padded(x, pads)
    K = w.tolist()
    b = [0.0] * C if bias is None else [float(v) for v in bias]
    out = np.zeros((N, C, Do, Ho, Wo))
    muls = 0
    for n in range(N):
        for m in range(C):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0
                        for i in range(kd):
                            for j in range(kh):
                                krow = K[m][i][j]
                                xrow = xp[n][m][z * s + i][y * s + j]
                                x0 = xx * s
                                for l in range(kw):
                                    acc += krow[l] * xrow[x0 + l]
                                muls += kw
                        out[n, m, z, y, xx] = acc + b[m]
    if counter is not None:
        counter.count += muls
    return out


def naive_pointwise(x, w, bias=None, counter: MacCounter | None = None) -> np.ndarray:
    """out[n, g, v] = b[g] + sum_m w[g, m] * x[n, m, v] at every voxel v."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _guard(x, w.shape[0])
    N, C, D, H, W = x.shape
    G = w.shape[0]
    assert w.shape[1] == C, "channel mismatch"
    X = x.tolist()
    K = w.tolist()
    b = [0.0] * G if bias is None else [float(v) for v in bias]
    out = np.zeros((N, G, D, H, W))
    muls = 0
    for n in range(N):
        for g in range(G):
            for z in range(D):
                for y in range(H):
                    for xx in range(W):
                        acc = 0.0
                        for m in range(C):
                            acc += K[g][m] * X[n][m][z][y][xx]
                            muls += 1
                        out[n, g, z, y, xx] = acc + b[g]
    if counter is not None:
        counter.count += muls
    return out


def naive_pseudo(x, horizontal, vertical, padding=1, counter: MacCounter | None = None) -> np.ndarray:
    """Horizontal step over (H, W) with full channel mixing, then vertical step over D.

    ``horizontal`` is ``(C, C, k, k)``, ``vertical`` is ``(G, C, k)``. No
    normalization or activation between the steps.
    """
    x = np.asarray(x, dtype=np.float64)
    horizontal = np.asarray(horizontal, dtype=np.float64)
    vertical = np.asarray(vertical, dtype=np.float64)
    _guard(x, vertical.shape[0])
    N, C, D, H, W = x.shape
    kh, kw = horizontal.shape[2:]
    kd = vertical.shape[2]
    assert horizontal.shape[:2] == (C, C) and vertical.shape[1] == C, "channel mismatch"
    G = vertical.shape[0]
    hp = (_pads(kh, padding), _pads(kw, padding))
    dp = _pads(kd, padding)

    # step one: G1[n, q, z, y, x] = sum_{m, i, j} Kh[q, m, i, j] * F[n, m, z, y+i, x+j]
    xp = _padded(x, ((0, 0),) + hp)
    Kh = horizontal.tolist()
    Ho = _extent(H, kh, 1, *hp[0])
    Wo = _extent(W, kw, 1, *hp[1])
    mid = np.zeros((N, C, D, Ho, Wo))
    muls = 0
    for n in range(N):
        for q in range(C):
            for z in range(D):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0
                        for m in range(C):
                            for i in range(kh):
                                krow = Kh[q][m][i]
                                xrow = xp[n][m][z][y + i]
                                for j in range(kw):
                                    acc += krow[j] * xrow[xx + j]
                                muls += kw
                        mid[n, q, z, y, xx] = acc

    # step two: G[n, g, z, y, x] = sum_{m, i} Kv[g, m, i] * G1[n, m, z+i, y, x]
    mp = _padded(mid, (dp, (0, 0), (0, 0)))
    Kv = vertical.tolist()
    Do = _extent(D, kd, 1, *dp)
    out = np.zeros((N, G, Do, Ho, Wo))
    for n in range(N):
        for g in range(G):
            for z in range(Do):
                for y in range(Ho):
                    for xx in range(Wo):
                        acc = 0.0
                        for m in range(C):
                            krow = Kv[g][m]
                            for i in range(kd):
                                acc += krow[i] * mp[n][m][z + i][y][xx]
                            muls += kd
                        out[n, g, z, y, xx] = acc
    if counter is not None:
        counter.count += muls
    return out


def naive_convtranspose(x, w, stride=1, counter: MacCounter | None = None) -> np.ndarray:
    """Scatter form: out[n, g, z*s+i, y*s+j, x*s+l] += w[m, g, i, j, l] * x[n, m, z, y, x]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _guard(x, w.shape[1])
    N, C, D, H, W = x.shape
    C2, G, kd, kh, kw = w.shape
    assert C2 == C, "channel mismatch"
    s = stride
    Do, Ho, Wo = (D - 1) * s + kd, (H - 1) * s + kh, (W - 1) * s + kw
    X = x.tolist()
    K = w.tolist()
    out = [[[[[0.0] * Wo for _ in range(Ho)] for _ in range(Do)] for _ in range(G)] for _ in range(N)]
    muls = 0
    for n in range(N):
        for m in range(C):
            for z in range(D):
                for y in range(H):
                    for xx in range(W):
                        v = X[n][m][z][y][xx]
                        for g in range(G):
                            for i in range(kd):
                                for j in range(kh):
                                    for l in range(kw):
                                        out[n][g][z * s + i][y * s + j][xx * s + l] += K[m][g][i][j][l] * v
                                        muls += 1
    if counter is not None:
        counter.count += muls
    return np.array(out, dtype=np.float64).reshape(N, G, Do, Ho, Wo)


def finite_diff_grad(f, params, h: float = 1e-5):
    """Central-difference gradient of scalar ``f()`` with respect to each array in ``params``.

    ``params`` is an array or a list of arrays that ``f`` reads; each entry is
    perturbed in place and restored. Returns a gradient per array.
    """
    single = isinstance(params, np.ndarray)
    arrays = [params] if single else list(params)
    grads = []
    for p in arrays:
        if p.dtype != np.float64:
            raise TypeError("finite differences need float64 parameters")
        if not p.flags.c_contiguous:
            raise ValueError("parameters must be C-contiguous to be perturbed in place")
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f())
            flat[idx] = orig - h
            fm = float(f())
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"objective is not finite near entry {idx}")
            gflat[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads[0] if single else grads


def relative_error(analytic, numeric, scale: float | None = None) -> float:
    """max |a - n| divided by ``scale``.

    ``scale`` defaults to the larger of the two gradients' max magnitudes. Pass
    a common scale when checking several tensors of one model: a tensor whose
    true gradient is exactly zero (a bias feeding batch norm) would otherwise
    divide finite-difference noise by nothing.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    scale = max(scale, 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)
