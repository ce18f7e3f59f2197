"""2-D max and average pooling over NCHW tensors.

Average pooling divides by the number of taps inside the unpadded input.
Max pooling returns flat ``h * W + w`` argmax indices for the backward pass.
"""
from __future__ import annotations

import enum

import numpy as np

from ..errors import InvalidShape, ShapeMismatch
from ..tensor import as_array, wrap_like


class PoolingMode(enum.Enum):
    MAX = "max"
    AVG = "avg"


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _geometry(x_shape, window, stride, pad):
    (kh, kw), (sh, sw), (ph, pw) = _pair(window), _pair(stride), _pair(pad)
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise InvalidShape("window and stride must be >= 1, padding >= 0")
    if len(x_shape) != 4:
        raise InvalidShape(f"pooling expects NCHW input, got shape {tuple(x_shape)}")
    _, _, h, w = x_shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise InvalidShape(f"pooling output {oh}x{ow} is empty")
    return kh, kw, sh, sw, ph, pw, oh, ow


def _taps(h, w, kh, kw, sh, sw, ph, pw, oh, ow):
    """Row/col of every window tap, shape ``[oh, ow, kh, kw]``, plus validity mask."""
    rows = (np.arange(oh) * sh - ph)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    cols = (np.arange(ow) * sw - pw)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), valid


def pooling_forward(mode: PoolingMode, window, stride, pad, x):
    """Returns ``(y, indices)``; ``indices`` is ``None`` for average pooling."""
    X = as_array(x)
    kh, kw, sh, sw, ph, pw, oh, ow = _geometry(X.shape, window, stride, pad)
    n, c, h, w = X.shape
    rows, cols, valid = _taps(h, w, kh, kw, sh, sw, ph, pw, oh, ow)
    patches = X[:, :, rows, cols]  # [n, c, oh, ow, kh, kw]
    if mode is PoolingMode.MAX:
        patches = np.where(valid, patches, -np.inf)
        flat = patches.reshape(n, c, oh, ow, kh * kw)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].astype(X.dtype)
        tap_index = (rows * w + cols).reshape(oh, ow, kh * kw)
        indices = np.take_along_axis(np.broadcast_to(tap_index, (n, c, oh, ow, kh * kw)), arg[..., None], axis=-1)[..., 0]
        return wrap_like(y, x), indices
    counts = valid.sum(axis=(2, 3)).astype(X.dtype)
    y = np.where(valid, patches, 0).sum(axis=(4, 5)) / counts
    return wrap_like(y.astype(X.dtype, copy=False), x), None


def pooling_backward(mode: PoolingMode, window, stride, pad, x, dy, indices=None):
    X = as_array(x)
    dY = as_array(dy)
    kh, kw, sh, sw, ph, pw, oh, ow = _geometry(X.shape, window, stride, pad)
    n, c, h, w = X.shape
    if dY.shape != (n, c, oh, ow):
        raise ShapeMismatch(f"dy shape {dY.shape}, expected {(n, c, oh, ow)}")
    dx = np.zeros((n, c, h * w), dtype=dY.dtype)
    if mode is PoolingMode.MAX:
        if indices is None:
            _, indices = pooling_forward(mode, window, stride, pad, X)
        idx = np.asarray(indices).reshape(n, c, oh * ow)
        for ni in range(n):
            for ci in range(c):
                np.add.at(dx[ni, ci], idx[ni, ci], dY[ni, ci].reshape(-1))
        return wrap_like(dx.reshape(n, c, h, w), x, dy)
    rows, cols, valid = _taps(h, w, kh, kw, sh, sw, ph, pw, oh, ow)
    counts = valid.sum(axis=(2, 3))
    share = dY / counts.astype(dY.dtype)  # [n, c, oh, ow]
    flat_idx = (rows * w + cols)[valid]
    contrib = np.broadcast_to(share[..., None, None], (n, c, oh, ow, kh, kw))[:, :, valid]
    for ni in range(n):
        for ci in range(c):
            np.add.at(dx[ni, ci], flat_idx, contrib[ni, ci])
    return wrap_like(dx.reshape(n, c, h, w), x, dy)
