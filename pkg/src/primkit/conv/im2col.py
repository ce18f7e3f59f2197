"""im2col unrolling and the im2col+GEMM convolution family.

The column matrix for one (sample, group) slice has ``(C/groups)*Y*X``
rows, ordered (c, y, x), and ``H'*W'`` columns in row-major output order.
It lives in the caller's workspace when one is given.
"""
from __future__ import annotations

import numpy as np

from ..tensor import OpCounters, gemm
from .direct import pad_input
from .problem import ConvDescriptor


def tap_indices(hp_w: int, fy: int, fx: int, oh: int, ow: int, conv: ConvDescriptor) -> np.ndarray:
    """Flat offsets into a padded ``[Hp, Wp]`` plane, shape ``[Y*X, H'*W']``."""
    oy = np.arange(oh) * conv.stride_h
    ox = np.arange(ow) * conv.stride_w
    ty = np.arange(fy) * conv.dilation_h
    tx = np.arange(fx) * conv.dilation_w
    rows = ty[:, None, None, None] + oy[None, None, :, None]
    cols = tx[None, :, None, None] + ox[None, None, None, :]
    return (rows * hp_w + cols).reshape(fy * fx, oh * ow)


def column_matrix_elems(cg: int, fy: int, fx: int, oh: int, ow: int) -> int:
    return cg * fy * fx * oh * ow


def _column_buffer(workspace, rows: int, cols: int, dtype) -> np.ndarray:
    if workspace is not None and dtype == np.float32:
        ws = np.frombuffer(workspace, dtype=np.float32, count=rows * cols)
        return ws.reshape(rows, cols)
    return np.empty((rows, cols), dtype=dtype)


def _geometry(h: int, w: int, fy: int, fx: int, conv: ConvDescriptor):
    oh = (h + 2 * conv.pad_h - conv.dilation_h * (fy - 1) - 1) // conv.stride_h + 1
    ow = (w + 2 * conv.pad_w - conv.dilation_w * (fx - 1) - 1) // conv.stride_w + 1
    return oh, ow, h + 2 * conv.pad_h, w + 2 * conv.pad_w


def unroll(x: np.ndarray, fy: int, fx: int, conv: ConvDescriptor, n: int = 0, group: int = 0,
           out: np.ndarray | None = None, taps: np.ndarray | None = None) -> np.ndarray:
    """Column matrix of sample ``n``, channel group ``group``."""
    _, c, h, w = x.shape
    cg = c // conv.group_count
    oh, ow, hp, wp = _geometry(h, w, fy, fx, conv)
    if taps is None:
        taps = tap_indices(wp, fy, fx, oh, ow, conv)
    planes = pad_input(x[n:n + 1, group * cg:(group + 1) * cg], conv.pad_h, conv.pad_w)[0]
    planes = planes.reshape(cg, hp * wp)
    if out is None:
        out = np.empty((cg * fy * fx, oh * ow), dtype=x.dtype)
    np.take(planes, taps, axis=1, out=out.reshape(cg, fy * fx, oh * ow))
    return out


def fold(cols: np.ndarray, dxp: np.ndarray, fy: int, fx: int, oh: int, ow: int, conv: ConvDescriptor) -> None:
    """Scatter-add a column matrix back into padded planes ``dxp`` ``[cg, Hp, Wp]`` (col2im)."""
    cg = dxp.shape[0]
    view = cols.reshape(cg, fy, fx, oh, ow)
    for yy in range(fy):
        r0 = yy * conv.dilation_h
        rows = slice(r0, r0 + conv.stride_h * (oh - 1) + 1, conv.stride_h)
        for xx in range(fx):
            c0 = xx * conv.dilation_w
            colsl = slice(c0, c0 + conv.stride_w * (ow - 1) + 1, conv.stride_w)
            dxp[:, rows, colsl] += view[:, yy, xx]


def forward(x: np.ndarray, w: np.ndarray, conv: ConvDescriptor, workspace=None,
            counters: OpCounters | None = None, taps: np.ndarray | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    oh, ow, hp, wp = _geometry(h, wd, fy, fx, conv)
    if taps is None:
        taps = tap_indices(wp, fy, fx, oh, ow, conv)
    dtype = np.result_type(x.dtype, w.dtype)
    col = _column_buffer(workspace, cg * fy * fx, oh * ow, dtype)
    out = np.empty((n, k, oh, ow), dtype=dtype)
    wmat = w.reshape(k, cg * fy * fx)
    for ni in range(n):
        for gi in range(g):
            unroll(x, fy, fx, conv, ni, gi, out=col, taps=taps)
            res = gemm(wmat[gi * kg:(gi + 1) * kg], col, counters=counters)
            out[ni, gi * kg:(gi + 1) * kg] = res.reshape(kg, oh, ow)
    return out


def backward_data(dy: np.ndarray, w: np.ndarray, conv: ConvDescriptor, in_hw: tuple[int, int], workspace=None,
                  counters: OpCounters | None = None) -> np.ndarray:
    n, k, oh, ow = dy.shape
    _, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    h, wd = in_hw
    dtype = np.result_type(dy.dtype, w.dtype)
    hp = max(h + 2 * conv.pad_h, conv.dilation_h * (fy - 1) + conv.stride_h * (oh - 1) + 1)
    wp = max(wd + 2 * conv.pad_w, conv.dilation_w * (fx - 1) + conv.stride_w * (ow - 1) + 1)
    dxp = np.zeros((n, cg * g, hp, wp), dtype=dtype)
    dcol = _column_buffer(workspace, cg * fy * fx, oh * ow, dtype)
    wmat = w.reshape(k, cg * fy * fx)
    for ni in range(n):
        for gi in range(g):
            dcol[...] = gemm(wmat[gi * kg:(gi + 1) * kg], dy[ni, gi * kg:(gi + 1) * kg].reshape(kg, oh * ow),
                             trans_a=True, counters=counters)
            fold(dcol, dxp[ni, gi * cg:(gi + 1) * cg], fy, fx, oh, ow, conv)
    return np.ascontiguousarray(dxp[:, :, conv.pad_h:conv.pad_h + h, conv.pad_w:conv.pad_w + wd])


def backward_weights(dy: np.ndarray, x: np.ndarray, conv: ConvDescriptor, filter_yx: tuple[int, int], workspace=None,
                     counters: OpCounters | None = None) -> np.ndarray:
    n, k, oh, ow = dy.shape
    _, c, h, wd = x.shape
    g = conv.group_count
    kg, cg = k // g, c // g
    fy, fx = filter_yx
    _, _, hp, wp = _geometry(h, wd, fy, fx, conv)
    taps = tap_indices(wp, fy, fx, oh, ow, conv)
    dtype = np.result_type(dy.dtype, x.dtype)
    col = _column_buffer(workspace, cg * fy * fx, oh * ow, dtype)
    dw = np.zeros((k, cg * fy * fx), dtype=dtype)
    for gi in range(g):
        acc = dw[gi * kg:(gi + 1) * kg]
        for ni in range(n):
            unroll(x, fy, fx, conv, ni, gi, out=col, taps=taps)
            acc[...] = gemm(dy[ni, gi * kg:(gi + 1) * kg].reshape(kg, oh * ow), col, acc,
                            trans_b=True, beta=1.0, counters=counters)
    return dw.reshape(k, cg, fy, fx)
