"""Patch-extraction kernels behind the convolution layers.

Two interchangeable backends exist: ``numba`` (JIT loops) and ``numpy``
(strided slice copies). ``PFANET_KERNELS=numpy|numba`` picks one at import;
the default is numba when it imports cleanly. Both accumulate every output
element in the same (ki, kj) order, so their results are bitwise identical.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange
    # the system TBB is too old for numba; skip probing it
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False


def _im2col_numpy(xp, k, dilation, stride, out_h, out_w):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + span_h:stride, x0:x0 + span_w:stride]
    return cols


def _col2im_numpy(cols, padded_shape, k, dilation, stride):
    out_h, out_w = cols.shape[-2:]
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            xp[:, :, y0:y0 + span_h:stride, x0:x0 + span_w:stride] += cols[:, :, i, j]
    return xp


if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(xp, k, dilation, stride, out_h, out_w):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
        for nc in prange(n * c):
            b, ch = nc // c, nc % c
            for i in range(k):
                for j in range(k):
                    for y in range(out_h):
                        sy = i * dilation + y * stride
                        for x in range(out_w):
                            cols[b, ch, i, j, y, x] = xp[b, ch, sy, j * dilation + x * stride]
        return cols

    # parallel over (n, c) planes only: each element's sum order is unchanged
    @njit(cache=True, parallel=True)
    def _col2im_nb(cols, xp, k, dilation, stride):
        n, c = cols.shape[0], cols.shape[1]
        out_h, out_w = cols.shape[4], cols.shape[5]
        for nc in prange(n * c):
            b, ch = nc // c, nc % c
            for i in range(k):
                for j in range(k):
                    for y in range(out_h):
                        sy = i * dilation + y * stride
                        for x in range(out_w):
                            xp[b, ch, sy, j * dilation + x * stride] += cols[b, ch, i, j, y, x]
        return xp

    def _im2col_numba(xp, k, dilation, stride, out_h, out_w):
        return _im2col_nb(np.ascontiguousarray(xp), k, dilation, stride, out_h, out_w)

    def _col2im_numba(cols, padded_shape, k, dilation, stride):
        xp = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), xp, k, dilation, stride)


BACKENDS = {"numpy": (_im2col_numpy, _col2im_numpy)}
if HAS_NUMBA:
    BACKENDS["numba"] = (_im2col_numba, _col2im_numba)

_requested = os.environ.get("PFANET_KERNELS", "numba" if HAS_NUMBA else "numpy").lower()
if _requested not in BACKENDS:
    raise ImportError(f"PFANET_KERNELS={_requested!r}; available: {sorted(BACKENDS)}")
BACKEND = _requested
im2col, col2im = BACKENDS[BACKEND]


def use_backend(name: str) -> None:
    """Switch the active backend at runtime (benchmarks and tests)."""
    global BACKEND, im2col, col2im
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(BACKENDS)}")
    BACKEND = name
    im2col, col2im = BACKENDS[name]
