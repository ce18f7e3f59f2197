"""FFT convolution for stride-1, dilation-1 problems.

Cross-correlation is computed as a full linear convolution with the flipped
filter. Planes are zero-padded to ``(Hin + Y - 1) x (Win + X - 1)`` rounded
up to powers of two, where ``Hin``/``Win`` include the convolution padding.
"""
from __future__ import annotations

import numpy as np

from ..tensor import next_pow2
from .direct import pad_input
from .problem import ConvDescriptor

COMPLEX_BYTES = 8


def fft_shape(h: int, w: int, fy: int, fx: int, conv: ConvDescriptor) -> tuple[int, int]:
    return next_pow2(h + 2 * conv.pad_h + fy - 1), next_pow2(w + 2 * conv.pad_w + fx - 1)


def workspace_bytes(n: int, c: int, h: int, w: int, k: int, fy: int, fx: int, conv: ConvDescriptor) -> int:
    """Bytes for the input, filter and output spectra."""
    hp, wp = fft_shape(h, w, fy, fx, conv)
    plane = hp * (wp // 2 + 1)
    cg = c // conv.group_count
    return COMPLEX_BYTES * plane * (n * c + k * cg + n * k)


def _spectra_buffers(workspace, shapes, dtype):
    if workspace is None or dtype != np.complex64:
        return [np.empty(s, dtype=dtype) for s in shapes]
    bufs = []
    offset = 0
    for s in shapes:
        count = int(np.prod(s))
        bufs.append(np.frombuffer(workspace, dtype=np.complex64, count=count, offset=offset).reshape(s))
        offset += count * COMPLEX_BYTES
    return bufs


def forward(x: np.ndarray, w: np.ndarray, conv: ConvDescriptor, workspace=None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    real = np.result_type(x.dtype, w.dtype)
    cplx = np.complex64 if real == np.float32 else np.complex128
    hp, wp = fft_shape(h, wd, fy, fx, conv)
    oh = h + 2 * conv.pad_h - fy + 1
    ow = wd + 2 * conv.pad_w - fx + 1
    spec = (hp, wp // 2 + 1)
    xs, fs, os_ = _spectra_buffers(workspace, [(n, c) + spec, (k, cg) + spec, (n, k) + spec], cplx)
    xp = pad_input(x.astype(real, copy=False), conv.pad_h, conv.pad_w)
    xs[...] = np.fft.rfft2(xp, s=(hp, wp))
    # filter spectra are computed once per call and reused for every sample
    fs[...] = np.fft.rfft2(w[:, :, ::-1, ::-1].astype(real, copy=False), s=(hp, wp))
    for gi in range(g):
        ks = slice(gi * kg, (gi + 1) * kg)
        cs = slice(gi * cg, (gi + 1) * cg)
        os_[:, ks] = np.einsum("nchw,kchw->nkhw", xs[:, cs], fs[ks])
    full = np.fft.irfft2(os_, s=(hp, wp))
    out = full[:, :, fy - 1:fy - 1 + oh, fx - 1:fx - 1 + ow]
    return np.ascontiguousarray(out, dtype=real)
