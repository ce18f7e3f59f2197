"""Direct convolution: the fixed-order loop nest that also serves as oracle.

Each output element accumulates its taps in (c, y, x) order, one scalar
multiply-add at a time. The loop over output positions is vectorized, which
does not change any element's accumulation sequence.
"""
from __future__ import annotations

import numpy as np

from ..tensor import OpCounters
from .problem import ConvDescriptor


def _window(start: int, stride: int, count: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def pad_input(x: np.ndarray, pad_h: int, pad_w: int, extra_h: int = 0, extra_w: int = 0) -> np.ndarray:
    if not (pad_h or pad_w or extra_h or extra_w):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h + extra_h), (pad_w, pad_w + extra_w)))


def forward(x: np.ndarray, w: np.ndarray, conv: ConvDescriptor, counters: OpCounters | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    oh = (h + 2 * conv.pad_h - conv.dilation_h * (fy - 1) - 1) // conv.stride_h + 1
    ow = (wd + 2 * conv.pad_w - conv.dilation_w * (fx - 1) - 1) // conv.stride_w + 1
    dtype = np.result_type(x.dtype, w.dtype)
    xp = pad_input(x, conv.pad_h, conv.pad_w)
    out = np.zeros((n, k, oh, ow), dtype=dtype)
    for gi in range(g):
        ks = slice(gi * kg, (gi + 1) * kg)
        acc = out[:, ks]
        for ci in range(cg):
            plane = xp[:, gi * cg + ci]
            for yy in range(fy):
                rows = _window(yy * conv.dilation_h, conv.stride_h, oh)
                for xx in range(fx):
                    cols = _window(xx * conv.dilation_w, conv.stride_w, ow)
                    acc += w[ks, ci, yy, xx][None, :, None, None] * plane[:, None, rows, cols]
    if counters is not None:
        counters.scalar_muls += n * k * oh * ow * cg * fy * fx
    return out


def backward_data(
    dy: np.ndarray, w: np.ndarray, conv: ConvDescriptor, in_hw: tuple[int, int], counters: OpCounters | None = None
) -> np.ndarray:
    n, k, oh, ow = dy.shape
    _, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    h, wd = in_hw
    dtype = np.result_type(dy.dtype, w.dtype)
    hp = max(h + 2 * conv.pad_h, conv.dilation_h * (fy - 1) + conv.stride_h * (oh - 1) + 1)
    wp = max(wd + 2 * conv.pad_w, conv.dilation_w * (fx - 1) + conv.stride_w * (ow - 1) + 1)
    dxp = np.zeros((n, cg * g, hp, wp), dtype=dtype)
    for gi in range(g):
        ks = slice(gi * kg, (gi + 1) * kg)
        dyg = dy[:, ks]
        for ci in range(cg):
            plane = dxp[:, gi * cg + ci]
            for yy in range(fy):
                rows = _window(yy * conv.dilation_h, conv.stride_h, oh)
                for xx in range(fx):
                    cols = _window(xx * conv.dilation_w, conv.stride_w, ow)
                    plane[:, rows, cols] += np.tensordot(w[ks, ci, yy, xx], dyg, axes=(0, 1))
    if counters is not None:
        counters.scalar_muls += n * k * oh * ow * cg * fy * fx
    return np.ascontiguousarray(dxp[:, :, conv.pad_h:conv.pad_h + h, conv.pad_w:conv.pad_w + wd])


def backward_weights(
    dy: np.ndarray, x: np.ndarray, conv: ConvDescriptor, filter_yx: tuple[int, int], counters: OpCounters | None = None
) -> np.ndarray:
    n, k, oh, ow = dy.shape
    _, c, _, _ = x.shape
    g = conv.group_count
    kg, cg = k // g, c // g
    fy, fx = filter_yx
    dtype = np.result_type(dy.dtype, x.dtype)
    xp = pad_input(x, conv.pad_h, conv.pad_w)
    dw = np.zeros((k, cg, fy, fx), dtype=dtype)
    for gi in range(g):
        ks = slice(gi * kg, (gi + 1) * kg)
        dyg = dy[:, ks]
        for ci in range(cg):
            plane = xp[:, gi * cg + ci]
            for yy in range(fy):
                rows = _window(yy * conv.dilation_h, conv.stride_h, oh)
                for xx in range(fx):
                    cols = _window(xx * conv.dilation_w, conv.stride_w, ow)
                    dw[ks, ci, yy, xx] = np.tensordot(dyg, plane[:, rows, cols], axes=([0, 2, 3], [0, 1, 2]))
    if counters is not None:
        counters.scalar_muls += n * k * oh * ow * cg * fy * fx
    return dw
