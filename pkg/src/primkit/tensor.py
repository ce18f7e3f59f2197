"""Tensor descriptors, element types, elementwise operators and the counted GEMM.

Every matrix product in the library goes through :func:`gemm` so that
:class:`OpCounters` can report exact call and multiply counts.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch

__all__ = [
    "ElementType",
    "TensorDescriptor",
    "Tensor",
    "OpCounters",
    "TensorOpKind",
    "round_bf16",
    "tensor_op",
    "gemm",
    "as_array",
    "wrap_like",
]

GEMM_BLOCK = 128


class ElementType(enum.Enum):
    F32 = "f32"
    BF16 = "bf16"

    @classmethod
    def parse(cls, text: str) -> "ElementType":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown element type {text!r}") from None

    @property
    def itemsize(self) -> int:
        # bf16 is storage-rounded but held widened to f32
        return 4


def round_bf16(x):
    """Round to the nearest bfloat16 (ties to even) and widen back to float32.

    Accepts a scalar or an array. NaN becomes a quiet NaN, infinities are kept.
    """
    scalar = np.ndim(x) == 0
    arr = np.array(x, dtype=np.float32, copy=True, ndmin=1)
    bits = arr.view(np.uint32)
    nan = np.isnan(arr)
    lsb = (bits >> 16) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)
    rounded = np.where(nan, (bits & np.uint32(0x80000000)) | np.uint32(0x7FC00000), rounded)
    out = rounded.astype(np.uint32).view(np.float32)
    if scalar:
        return float(out[0])
    return out.reshape(np.shape(x))


def _packed_strides(dims: Sequence[int]) -> tuple[int, ...]:
    strides = []
    acc = 1
    for d in reversed(dims):
        strides.append(acc)
        acc *= d
    return tuple(reversed(strides))


@dataclass(frozen=True)
class TensorDescriptor:
    dims: tuple[int, ...]
    strides: tuple[int, ...] = ()
    etype: ElementType = ElementType.F32

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ShapeMismatch(f"dims must be positive, got {dims}")
        strides = tuple(int(s) for s in self.strides) if self.strides else _packed_strides(dims)
        if len(strides) != len(dims):
            raise ShapeMismatch(f"{len(dims)} dims but {len(strides)} strides")
        if any(s < 0 for s in strides):
            raise ShapeMismatch(f"strides must be non-negative, got {strides}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "strides", strides)

    @classmethod
    def nchw(cls, n: int, c: int, h: int, w: int, etype: ElementType = ElementType.F32) -> "TensorDescriptor":
        return cls((n, c, h, w), etype=etype)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def layout(self) -> str:
        return "NCHW" if self.ndim == 4 else "packed"

    @property
    def is_packed(self) -> bool:
        return self.strides == _packed_strides(self.dims)

    @property
    def element_space(self) -> int:
        """Buffer length implied by dims and strides."""
        return sum((d - 1) * s for d, s in zip(self.dims, self.strides)) + 1

    @property
    def nbytes(self) -> int:
        return self.element_space * self.etype.itemsize


class Tensor:
    """Dense float32 storage with an element type tag.

    BF16 tensors hold bfloat16-rounded values widened to float32, so every
    element is a fixed point of :func:`round_bf16`.
    """

    __slots__ = ("data", "etype")

    def __init__(self, data, etype: ElementType = ElementType.F32):
        arr = np.array(data, dtype=np.float32, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if etype is ElementType.BF16:
            arr = round_bf16(arr)
        self.data = arr
        self.etype = etype

    @classmethod
    def zeros(cls, dims: Sequence[int], etype: ElementType = ElementType.F32) -> "Tensor":
        return cls(np.zeros(tuple(dims), dtype=np.float32), etype)

    @property
    def desc(self) -> TensorDescriptor:
        return TensorDescriptor(self.data.shape, etype=self.etype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, etype: ElementType) -> "Tensor":
        return Tensor(self.data, etype)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, etype={self.etype.value})"


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def wrap_like(result: np.ndarray, *inputs):
    """Return ``result`` as a Tensor when any input was one.

    The result is BF16 (rounded on store) if any Tensor input was BF16.
    Plain-array inputs keep plain arrays and their dtype, which is how the
    float64 reference paths run through the same code.
    """
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    if not tensors:
        return result
    etype = ElementType.BF16 if any(t.etype is ElementType.BF16 for t in tensors) else ElementType.F32
    return Tensor(result, etype)


@dataclass
class OpCounters:
    gemm_calls: int = 0
    scalar_muls: int = 0
    buffer_roundtrips: int = 0
    kernel_runs: int = 0
    tuning_evals: int = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) for f in fields(self)})

    def __sub__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)


class TensorOpKind(enum.Enum):
    ADD = "add"
    MUL = "mul"
    MIN = "min"
    MAX = "max"


_TENSOR_OPS = {
    TensorOpKind.ADD: np.add,
    TensorOpKind.MUL: np.multiply,
    TensorOpKind.MIN: np.minimum,
    TensorOpKind.MAX: np.maximum,
}


def tensor_op(kind: TensorOpKind, alpha: float, a, beta: float, b):
    """Apply ``kind`` elementwise to ``alpha*a`` and ``beta*b``.

    ``b`` broadcasts to ``a``: each of its dims must equal ``a``'s or be 1.
    Missing leading dims of ``b`` are treated as 1.
    """
    A = as_array(a)
    B = as_array(b)
    if B.ndim > A.ndim:
        raise ShapeMismatch(f"B has more dims than A: {B.shape} vs {A.shape}")
    bshape = (1,) * (A.ndim - B.ndim) + B.shape
    for da, db in zip(A.shape, bshape):
        if db != da and db != 1:
            raise ShapeMismatch(f"B {B.shape} is not broadcastable to A {A.shape}")
    dtype = np.result_type(A.dtype, B.dtype)
    out = _TENSOR_OPS[kind](A * dtype.type(alpha), B.reshape(bshape) * dtype.type(beta))
    return wrap_like(out.astype(dtype, copy=False), a, b)


def gemm(
    a,
    b,
    c=None,
    *,
    trans_a: bool = False,
    trans_b: bool = False,
    alpha: float = 1.0,
    beta: float = 0.0,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """``alpha * op(a) @ op(b) + beta * c`` as a cache-blocked loop over tiles.

    Returns a new array; ``c`` is not modified. Counts one call and ``M*N*K``
    multiplies on ``counters``.
    """
    A = as_array(a)
    B = as_array(b)
    if A.ndim != 2 or B.ndim != 2:
        raise ShapeMismatch(f"gemm needs matrices, got {A.shape} and {B.shape}")
    if trans_a:
        A = A.T
    if trans_b:
        B = B.T
    m, k = A.shape
    k2, n = B.shape
    if k != k2:
        raise ShapeMismatch(f"inner dimensions differ: {A.shape} x {B.shape}")
    dtype = np.result_type(A.dtype, B.dtype)
    if c is None:
        if beta != 0.0:
            raise ShapeMismatch("beta != 0 requires C")
        out = np.zeros((m, n), dtype=dtype)
    else:
        C = as_array(c)
        if C.shape != (m, n):
            raise ShapeMismatch(f"C has shape {C.shape}, expected {(m, n)}")
        dtype = np.result_type(dtype, C.dtype)
        out = C.astype(dtype, copy=True)
        if beta != 1.0:
            out *= dtype.type(beta)
    if counters is not None:
        counters.gemm_calls += 1
        counters.scalar_muls += m * n * k
    if alpha == 0.0 or k == 0:
        return out
    A = A.astype(dtype, copy=False)
    B = B.astype(dtype, copy=False)
    if alpha != 1.0:
        A = A * dtype.type(alpha)
    bs = GEMM_BLOCK
    for i0 in range(0, m, bs):
        i1 = min(i0 + bs, m)
        for j0 in range(0, n, bs):
            j1 = min(j0 + bs, n)
            tile = out[i0:i1, j0:j1]
            for p0 in range(0, k, bs):
                p1 = min(p0 + bs, k)
                tile += A[i0:i1, p0:p1] @ B[p0:p1, j0:j1]
    return out


def nbytes_f32(count: int) -> int:
    return int(count) * 4


def next_pow2(v: int) -> int:
    return 1 << max(0, math.ceil(math.log2(v))) if v > 1 else 1
