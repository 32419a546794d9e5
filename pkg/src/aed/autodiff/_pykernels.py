"""Pure numpy implementations of the convolution and pooling kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Replication-padded patches of ``x`` (B, C, L) as (B, L, C*k)."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)), mode="edge")
    win = sliding_window_view(xp, k, axis=2)  # (B, C, L, k)
    B, C, L, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, L, C * k)


def col2im(dcols: np.ndarray, channels: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to (B, C, L)."""
    B, L, _ = dcols.shape
    p = k // 2
    d = dcols.reshape(B, L, channels, k)
    dxp = np.zeros((B, channels, L + 2 * p), dtype=dcols.dtype)
    for j in range(k):
        dxp[:, :, j:j + L] += d[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, p:p + L].copy()
    if p:
        dx[:, :, 0] += dxp[:, :, :p].sum(axis=-1)
        dx[:, :, -1] += dxp[:, :, p + L:].sum(axis=-1)
    return dx


def maxpool_fwd(x: np.ndarray, pool: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling over the last axis; returns (out, argmax)."""
    B, C, L = x.shape
    n = L // pool
    blocks = x[:, :, :n * pool].reshape(B, C, n, pool)
    arg = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    idx = arg + np.arange(n) * pool
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_bwd(dout: np.ndarray, idx: np.ndarray, length: int) -> np.ndarray:
    B, C, _ = dout.shape
    dx = np.zeros((B, C, length), dtype=dout.dtype)
    np.put_along_axis(dx, idx, dout, axis=-1)
    return dx
