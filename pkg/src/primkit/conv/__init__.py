"""Convolution algorithms: im2col+GEMM, direct, Winograd, FFT and implicit GEMM."""
from __future__ import annotations

import numpy as np

from ..errors import AlgoNotApplicable, InvalidShape
from ..tensor import OpCounters, TensorDescriptor, as_array, wrap_like
from . import im2col as _im2col
from .api import (
    allocate_workspace,
    applicability,
    conv_backward_data,
    conv_backward_weights,
    conv_forward,
    execute,
    is_applicable,
    workspace_size,
)
from .implicit_gemm import TileConfig
from .problem import ConvAlgo, ConvDescriptor, ConvDirection, ConvMode, ConvProblem, output_dims
from .winograd import TILE_OUT as WINOGRAD_TILE

__all__ = [
    "ConvAlgo",
    "ConvDescriptor",
    "ConvDirection",
    "ConvMode",
    "ConvProblem",
    "TileConfig",
    "allocate_workspace",
    "applicability",
    "conv_backward_data",
    "conv_backward_weights",
    "conv_forward",
    "execute",
    "im2col",
    "is_applicable",
    "output_dims",
    "winograd_tile_multiplies",
    "workspace_size",
]


def im2col(input, filter_desc: TensorDescriptor, conv: ConvDescriptor, n: int = 0, group: int = 0):
    """Column matrix ``[(C/groups)*Y*X, H'*W']`` of one (sample, group) slice."""
    if conv.mode is not ConvMode.CONVOLUTION:
        raise InvalidShape("im2col is defined for forward-mode convolution")
    x = as_array(input)
    output_dims(TensorDescriptor(x.shape), filter_desc, conv)
    _, _, fy, fx = filter_desc.dims
    return wrap_like(_im2col.unroll(x, fy, fx, conv, n, group), input)


def winograd_tile_multiplies(algo: ConvAlgo = ConvAlgo.WINOGRAD) -> int:
    """Scalar multiplies counted for one 2x2 output tile of a 3x3 filter (C = K = 1)."""
    if algo not in (ConvAlgo.WINOGRAD, ConvAlgo.DIRECT):
        raise AlgoNotApplicable("only Winograd and Direct are compared per tile")
    counters = OpCounters()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, WINOGRAD_TILE + 2, WINOGRAD_TILE + 2)).astype(np.float32)
    w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    conv_forward(algo, x, w, ConvDescriptor(), counters=counters)
    return counters.scalar_muls
