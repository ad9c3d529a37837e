"""
Forward/backward building blocks for the classification network.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
``(dout, cache)``. Tensors are NHWC float64.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Cache = Any


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Cache]:
    """
    3x3 convolution, stride 1, zero padding 1.

    Args:
        x: Input of shape (N, H, W, Cin)
        w: Filters of shape (Cin, 3, 3, F)
        b: Biases of shape (F,)

    Returns:
        Output of shape (N, H, W, F) and the cache for the backward pass
    """
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, Cin, 3, 3)
    out = np.tensordot(windows, w, axes=([3, 4, 5], [0, 1, 2])) + b
    return out, (x.shape, windows, w)


def conv3x3_backward(
    dout: np.ndarray, cache: Cache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, windows, w = cache
    n, h, wd, cin = x_shape
    db = dout.sum(axis=(0, 1, 2))
    dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2]))
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += dout @ w[:, i, j, :].T
    return dxp[:, 1:-1, 1:-1, :], dw, db


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, Cache]:
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    return dout * (cache > 0)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """2x2 max pooling with stride 2; gradients route to the first maximal element."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = (
        x[:, : h2 * 2, : w2 * 2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    x_shape, idx = cache
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dblocks = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : h2 * 2, : w2 * 2, :] = (
        dblocks.reshape(n, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h2 * 2, w2 * 2, c)
    )
    return dx


def gap_forward(x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Global average pooling over the spatial axes."""
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    n, h, w, c = cache
    return np.broadcast_to(dout[:, None, None, :] / (h * w), (n, h, w, c)).copy()


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Affine map with weights laid out as (out_features, in_features)."""
    return x @ w.T + b, (x, w)


def linear_backward(
    dout: np.ndarray, cache: Cache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)
