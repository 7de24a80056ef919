"""Hot numeric kernels.

Every kernel has a numba ``@njit`` implementation and a pure-numpy twin.
Set ``MSCRED_PURE_NUMPY=1`` before import to force the numpy path; the
numba path is also skipped when numba cannot be imported.

Layout conventions: images are ``(batch, height, width, channels)``,
im2col rows are output pixels and columns run over ``(di, dj, channel)``
so they line up with a kernel of shape ``(k, k, c_in, c_out)`` reshaped
to ``(k*k*c_in, c_out)``.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("MSCRED_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("disabled by MSCRED_PURE_NUMPY")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


USE_NUMBA = NUMBA_AVAILABLE


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


@njit(cache=True)
def _im2col_numba(xp, k, stride, ho, wo):
    b, _, _, c = xp.shape
    out = np.empty((b * ho * wo, k * k * c))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for di in range(k):
                    for dj in range(k):
                        for ch in range(c):
                            out[row, col] = xp[n, i * stride + di, j * stride + dj, ch]
                            col += 1
    return out


@njit(cache=True)
def _col2im_numba(cols, b, hp, wp, c, k, stride, ho, wo):
    out = np.zeros((b, hp, wp, c))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                col = 0
                for di in range(k):
                    for dj in range(k):
                        for ch in range(c):
                            out[n, i * stride + di, j * stride + dj, ch] += cols[row, col]
                            col += 1
    return out


def _im2col_numpy(xp, k, stride, ho, wo):
    b, _, _, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (b, hp-k+1, wp-k+1, c, k, k)
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)


def _col2im_numpy(cols, b, hp, wp, c, k, stride, ho, wo):
    out = np.zeros((b, hp, wp, c))
    c6 = cols.reshape(b, ho, wo, k, k, c)
    for di in range(k):
        for dj in range(k):
            out[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] += c6[
                :, :, :, di, dj, :
            ]
    return out


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # The strided numpy copy beats the loop kernel here (see benchmarks/), so
    # both backends use it; the numba version is kept as a cross-check.
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add im2col rows back into a padded image of ``shape``."""
    b, hp, wp, c = shape
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if USE_NUMBA:
        return _col2im_numba(cols, b, hp, wp, c, k, stride, ho, wo)
    return _col2im_numpy(cols, b, hp, wp, c, k, stride, ho, wo)


# ---------------------------------------------------------------------------
# signature matrices
# ---------------------------------------------------------------------------


@njit(cache=True)
def _signature_numba(x, steps, scales):
    n = x.shape[0]
    m = steps.shape[0]
    s = scales.shape[0]
    out = np.empty((m, n, n, s))
    for a in range(m):
        t = steps[a]
        for c in range(s):
            w = scales[c]
            for i in range(n):
                for j in range(i + 1):
                    acc = 0.0
                    for d in range(w + 1):
                        acc += x[i, t - d] * x[j, t - d]
                    acc /= w
                    out[a, i, j, c] = acc
                    out[a, j, i, c] = acc
    return out


def _signature_numpy(x, steps, scales):
    n = x.shape[0]
    out = np.empty((len(steps), n, n, len(scales)))
    for c, w in enumerate(scales):
        win = sliding_window_view(x, w + 1, axis=1)  # (n, T-w, w+1); window q ends at q+w
        sel = win[:, steps - w, :]
        out[..., c] = np.einsum("imk,jmk->mij", sel, sel) / w
    return out


def signature_stack(x: np.ndarray, steps, scales) -> np.ndarray:
    """Signature tensors for every step in ``steps``: shape ``(m, n, n, s)``.

    Entry ``[a, i, j, c]`` is the inner product of series i and j over the
    ``scales[c] + 1`` points ending at ``steps[a]``, divided by ``scales[c]``.
    Callers validate that every step has enough left context.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    steps = np.ascontiguousarray(steps, dtype=np.int64)
    scales = np.ascontiguousarray(scales, dtype=np.int64)
    if USE_NUMBA:
        return _signature_numba(x, steps, scales)
    return _signature_numpy(x, steps, scales)
