"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``MFCCA_DISABLE_NUMBA`` is set to a non-empty value other than
``0``. Both paths compute the same quantities in float64 and are checked
against each other in the test suite.
"""

import logging
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _numba_requested():
    flag = os.environ.get("MFCCA_DISABLE_NUMBA", "")
    return flag in ("", "0")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by MFCCA_DISABLE_NUMBA")
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def _njit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, fastmath=False)(func)


# ---------------------------------------------------------------------------
# conv2d: x[B,Cin,H,W], w[Cout,Cin,kh,kw], same zero padding, cross-correlation
# ---------------------------------------------------------------------------

@_njit
def _conv2d_fwd_loops(x, w, b):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    ph = kh // 2
    pw = kw // 2
    out = np.empty((B, Cout, H, W))
    for n in range(B):
        for o in range(Cout):
            for y in range(H):
                for xx in range(W):
                    out[n, o, y, xx] = b[o]
            for c in range(Cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(H):
                            yy = y + i - ph
                            if yy < 0 or yy >= H:
                                continue
                            x0 = max(0, pw - j)
                            x1 = min(W, W + pw - j)
                            for xx in range(x0, x1):
                                out[n, o, y, xx] += wv * x[n, c, yy, xx + j - pw]
    return out


@_njit
def _conv2d_bwd_loops(x, w, g):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    ph = kh // 2
    pw = kw // 2
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(Cout)
    for n in range(B):
        for o in range(Cout):
            for y in range(H):
                for xx in range(W):
                    gb[o] += g[n, o, y, xx]
            for c in range(Cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        acc = 0.0
                        for y in range(H):
                            yy = y + i - ph
                            if yy < 0 or yy >= H:
                                continue
                            x0 = max(0, pw - j)
                            x1 = min(W, W + pw - j)
                            for xx in range(x0, x1):
                                gv = g[n, o, y, xx]
                                acc += gv * x[n, c, yy, xx + j - pw]
                                gx[n, c, yy, xx + j - pw] += gv * wv
                        gw[o, c, i, j] += acc
    return gx, gw, gb


def _conv2d_windows(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # [B, Cin, H, W, kh, kw]
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))


def _conv2d_fwd_numpy(x, w, b):
    win = _conv2d_windows(x, w.shape[2], w.shape[3])
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B,H,W,Cout]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv2d_bwd_numpy(x, w, g):
    kh, kw = w.shape[2], w.shape[3]
    win = _conv2d_windows(x, kh, kw)
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout,Cin,kh,kw]
    gb = g.sum(axis=(0, 2, 3))
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = _conv2d_fwd_numpy(g, w_flip, np.zeros(w.shape[1]))
    return gx, gw, gb


def conv2d_forward(x, w, b):
    if HAVE_NUMBA:
        return _conv2d_fwd_loops(x, w, b)
    return _conv2d_fwd_numpy(x, w, b)


def conv2d_backward(x, w, g):
    if HAVE_NUMBA:
        return _conv2d_bwd_loops(x, w, np.ascontiguousarray(g))
    return _conv2d_bwd_numpy(x, w, g)


# ---------------------------------------------------------------------------
# depthwise conv along time: x[N,T,D], w[D,k], same zero padding
# ---------------------------------------------------------------------------

@_njit
def _dwconv_fwd_loops(x, w, b):
    N, T, D = x.shape
    k = w.shape[1]
    p = k // 2
    out = np.empty_like(x)
    for n in range(N):
        for t in range(T):
            for d in range(D):
                out[n, t, d] = b[d]
            for j in range(k):
                s = t + j - p
                if s < 0 or s >= T:
                    continue
                for d in range(D):
                    out[n, t, d] += w[d, j] * x[n, s, d]
    return out


@_njit
def _dwconv_bwd_loops(x, w, g):
    N, T, D = x.shape
    k = w.shape[1]
    p = k // 2
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(D)
    for n in range(N):
        for t in range(T):
            for d in range(D):
                gb[d] += g[n, t, d]
            for j in range(k):
                s = t + j - p
                if s < 0 or s >= T:
                    continue
                for d in range(D):
                    gw[d, j] += g[n, t, d] * x[n, s, d]
                    gx[n, s, d] += g[n, t, d] * w[d, j]
    return gx, gw, gb


def _dwconv_fwd_numpy(x, w, b):
    k = w.shape[1]
    p = k // 2
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    out = np.broadcast_to(b, x.shape).copy()
    for j in range(k):
        out += xp[:, j:j + T, :] * w[:, j]
    return out


def _dwconv_bwd_numpy(x, w, g):
    k = w.shape[1]
    p = k // 2
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        gw[:, j] = (g * xp[:, j:j + T, :]).sum(axis=(0, 1))
        gxp[:, j:j + T, :] += g * w[:, j]
    return gxp[:, p:p + T, :], gw, g.sum(axis=(0, 1))


def dwconv_forward(x, w, b):
    if HAVE_NUMBA:
        return _dwconv_fwd_loops(x, w, b)
    return _dwconv_fwd_numpy(x, w, b)


def dwconv_backward(x, w, g):
    if HAVE_NUMBA:
        return _dwconv_bwd_loops(x, w, np.ascontiguousarray(g))
    return _dwconv_bwd_numpy(x, w, g)


# ---------------------------------------------------------------------------
# Levenshtein distance over integer token ids
# ---------------------------------------------------------------------------

@_njit
def _edit_distance_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            cur[j] = best
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def _edit_distance_numpy(a, b):
    # row-wise DP; the insertion recurrence is resolved with a running minimum
    m = b.shape[0]
    prev = np.arange(m + 1)
    cols = np.arange(m + 1)
    for i in range(1, a.shape[0] + 1):
        diag = prev[:-1] + (a[i - 1] != b)
        best = np.empty(m + 1, dtype=prev.dtype)
        best[0] = i
        best[1:] = np.minimum(prev[1:] + 1, diag)
        # cur[j] = min_k<=j (best[k] + j - k)
        prev = np.minimum.accumulate(best - cols) + cols
    return int(prev[m])


def edit_distance(a, b):
    """Levenshtein distance between two integer sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if HAVE_NUMBA:
        return int(_edit_distance_loops(a, b))
    return _edit_distance_numpy(a, b)


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
