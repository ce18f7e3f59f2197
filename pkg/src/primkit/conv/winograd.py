"""Winograd F(2x2, 3x3) convolution.

Each 2x2 output tile is computed from a 4x4 input tile as
``A^T [(G g G^T) * (B^T d B)] A``. The elementwise product in the
transformed domain is done as 16 channel-reduction GEMMs, one per
transformed coordinate, so it costs 16 multiplies per tile per
(input channel, output channel) pair instead of 36.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor import OpCounters, gemm
from .direct import pad_input
from .problem import ConvDescriptor

BT = np.array([[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]], dtype=np.float64)
G = np.array([[1, 0, 0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0, 0, 1]], dtype=np.float64)
AT = np.array([[1, 1, 1, 0], [0, 1, -1, -1]], dtype=np.float64)

TILE_OUT = 2
TILE_IN = 4


def transform_filter(w: np.ndarray) -> np.ndarray:
    """``G g G^T`` for every ``[K, C, 3, 3]`` filter slice."""
    g = G.astype(w.dtype)
    return g @ w @ g.T


def transform_input(tiles: np.ndarray) -> np.ndarray:
    bt = BT.astype(tiles.dtype)
    return bt @ tiles @ bt.T


def transform_output(m: np.ndarray) -> np.ndarray:
    at = AT.astype(m.dtype)
    return at @ m @ at.T


def forward(x: np.ndarray, w: np.ndarray, conv: ConvDescriptor, counters: OpCounters | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, cg, fy, fx = w.shape
    assert (fy, fx) == (3, 3)
    g = conv.group_count
    kg = k // g
    dtype = np.result_type(x.dtype, w.dtype)
    oh = h + 2 * conv.pad_h - 2
    ow = wd + 2 * conv.pad_w - 2
    th, tw = -(-oh // TILE_OUT), -(-ow // TILE_OUT)
    xp = pad_input(x.astype(dtype, copy=False), conv.pad_h, conv.pad_w, 2 * th - oh, 2 * tw - ow)
    tiles = sliding_window_view(xp, (TILE_IN, TILE_IN), axis=(2, 3))[:, :, ::TILE_OUT, ::TILE_OUT]
    v = transform_input(tiles)  # [n, c, th, tw, 4, 4]
    u = transform_filter(w.astype(dtype, copy=False))  # [k, cg, 4, 4]
    # [4, 4, c, n*th*tw] so each transformed coordinate is a contiguous matrix
    v = np.ascontiguousarray(v.transpose(4, 5, 1, 0, 2, 3)).reshape(TILE_IN, TILE_IN, c, n * th * tw)
    u = np.ascontiguousarray(u.transpose(2, 3, 0, 1))
    m = np.empty((TILE_IN, TILE_IN, k, n * th * tw), dtype=dtype)
    for gi in range(g):
        ks = slice(gi * kg, (gi + 1) * kg)
        cs = slice(gi * cg, (gi + 1) * cg)
        for i in range(TILE_IN):
            for j in range(TILE_IN):
                m[i, j, ks] = gemm(u[i, j, ks], v[i, j, cs], counters=counters)
    m = m.reshape(TILE_IN, TILE_IN, k, n, th, tw).transpose(3, 2, 4, 5, 0, 1)
    y = transform_output(m)  # [n, k, th, tw, 2, 2]
    out = y.transpose(0, 1, 2, 4, 3, 5).reshape(n, k, 2 * th, 2 * tw)
    return np.ascontiguousarray(out[:, :, :oh, :ow])
