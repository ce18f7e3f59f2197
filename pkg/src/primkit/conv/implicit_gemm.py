"""Implicit-GEMM convolution with a blockwise / threadwise work division.

The GEMM view is ``M = K/groups`` output channels by ``P = N*H'*W'`` output
pixels with reduction over ``(C/groups, Y, X)``. Work is split as:

* a grid of ``tile_m x tile_n`` output blocks (all blocks run side by side,
  the vectorized axis standing in for parallel workgroups);
* per block, a blockwise slice of ``tile_k`` input channels of the weights
  and of the input window is staged in a block-local tile buffer;
* from the tile buffer each thread takes a threadwise slice for one
  (c, y, x) tap into its register micro-tile and performs a 1x1
  convolution (an outer product) into its accumulator;
* the inner loop runs to the end of the staged (c, y, x) range, the outer
  loop to the end of C, then accumulators are copied out.

Every output element sees its taps in global (c, y, x) order, so the
result does not depend on the tile sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import OpCounters
from .direct import pad_input
from .problem import ConvDescriptor

TILE_M_CHOICES = (1, 2, 4, 8, 16)
TILE_N_CHOICES = (4, 8, 16, 32, 64)
TILE_K_CHOICES = (1, 2, 4, 8)
PARAM_NAMES = ("tile_m", "tile_n", "tile_k")
THREAD_TILE = 4


@dataclass(frozen=True)
class TileConfig:
    tile_m: int
    tile_n: int
    tile_k: int

    @property
    def thread_m(self) -> int:
        return min(THREAD_TILE, self.tile_m)

    @property
    def thread_n(self) -> int:
        return min(THREAD_TILE, self.tile_n)

    def is_valid(self, kg: int, cg: int) -> bool:
        return (
            self.tile_m in TILE_M_CHOICES
            and self.tile_n in TILE_N_CHOICES
            and self.tile_k in TILE_K_CHOICES
            and kg % self.tile_m == 0
            and cg % self.tile_k == 0
        )


def tuning_space(kg: int, cg: int) -> list[TileConfig]:
    space = []
    for tm in TILE_M_CHOICES:
        for tn in TILE_N_CHOICES:
            for tk in TILE_K_CHOICES:
                cfg = TileConfig(tm, tn, tk)
                if cfg.is_valid(kg, cg):
                    space.append(cfg)
    return space


def default_config(kg: int, cg: int) -> TileConfig:
    tm = max(t for t in TILE_M_CHOICES if kg % t == 0)
    tk = max(t for t in TILE_K_CHOICES if cg % t == 0 and t <= 4)
    return TileConfig(tm, 64, tk)


def forward(x: np.ndarray, w: np.ndarray, conv: ConvDescriptor, cfg: TileConfig,
            counters: OpCounters | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, cg, fy, fx = w.shape
    g = conv.group_count
    kg = k // g
    if not cfg.is_valid(kg, cg):
        raise ValueError(f"tile config {cfg} is not valid for K/groups={kg}, C/groups={cg}")
    oh = (h + 2 * conv.pad_h - conv.dilation_h * (fy - 1) - 1) // conv.stride_h + 1
    ow = (wd + 2 * conv.pad_w - conv.dilation_w * (fx - 1) - 1) // conv.stride_w + 1
    dtype = np.result_type(x.dtype, w.dtype)
    xp = pad_input(x.astype(dtype, copy=False), conv.pad_h, conv.pad_w)

    tm, tn, tk = cfg.tile_m, cfg.tile_n, cfg.tile_k
    thm, thn = cfg.thread_m, cfg.thread_n
    p = n * oh * ow
    nbm = kg // tm
    nbn = -(-p // tn)
    # pixel coordinates of every block slot; slots past P read pixel 0 and are dropped
    slot = np.arange(nbn * tn)
    slot = np.where(slot < p, slot, 0)
    pn = slot // (oh * ow)
    prow = (slot // ow) % oh * conv.stride_h
    pcol = slot % ow * conv.stride_w
    pn, prow, pcol = (a.reshape(nbn, 1, 1, 1, tn) for a in (pn, prow, pcol))
    ty = (np.arange(fy) * conv.dilation_h).reshape(1, 1, fy, 1, 1)
    tx = (np.arange(fx) * conv.dilation_w).reshape(1, 1, 1, fx, 1)

    out = np.empty((n, k, oh, ow), dtype=dtype)
    for gi in range(g):
        wg = w[gi * kg:(gi + 1) * kg].astype(dtype, copy=False).reshape(nbm, tm, cg, fy, fx)
        # register accumulators: [block_m, block_n, threads_m, threads_n, thread_m, thread_n]
        acc = np.zeros((nbm, nbn, tm // thm, tn // thn, thm, thn), dtype=dtype)
        for c0 in range(0, cg, tk):
            # blockwise slice into the block tile buffer
            lds_w = wg[:, :, c0:c0 + tk]
            chans = (gi * cg + c0 + np.arange(tk)).reshape(1, tk, 1, 1, 1)
            lds_i = xp[pn, chans, prow + ty, pcol + tx]  # [nbn, tk, Y, X, tn]
            for ci in range(tk):
                for yy in range(fy):
                    for xx in range(fx):
                        # threadwise slice into registers, then threadwise 1x1 convolution
                        reg_w = lds_w[:, :, ci, yy, xx].reshape(nbm, 1, tm // thm, 1, thm, 1)
                        reg_i = lds_i[:, ci, yy, xx].reshape(1, nbn, 1, tn // thn, 1, thn)
                        acc += reg_w * reg_i
        # threadwise copy of the accumulators to the output tensor
        blocks = acc.transpose(0, 2, 4, 1, 3, 5).reshape(kg, nbn * tn)[:, :p]
        out[:, gi * kg:(gi + 1) * kg] = blocks.reshape(kg, n, oh, ow).transpose(1, 0, 2, 3)
    if counters is not None:
        counters.scalar_muls += n * k * oh * ow * cg * fy * fx
    return out
