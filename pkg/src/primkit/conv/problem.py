"""Convolution descriptors, the canonical problem record and shape arithmetic."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..errors import GroupMismatch, InvalidShape, ShapeMismatch
from ..tensor import ElementType, TensorDescriptor


class ConvMode(enum.Enum):
    CONVOLUTION = "C"
    TRANSPOSE = "T"


class ConvAlgo(enum.Enum):
    IM2COL_GEMM = "Im2colGemm"
    DIRECT = "Direct"
    WINOGRAD = "Winograd"
    FFT = "FFT"
    IMPLICIT_GEMM = "ImplicitGemm"


class ConvDirection(enum.Enum):
    FORWARD = "F"
    BACKWARD_DATA = "BD"
    BACKWARD_WEIGHTS = "BW"


@dataclass(frozen=True)
class ConvDescriptor:
    pad_h: int = 0
    pad_w: int = 0
    stride_h: int = 1
    stride_w: int = 1
    dilation_h: int = 1
    dilation_w: int = 1
    mode: ConvMode = ConvMode.CONVOLUTION
    group_count: int = 1

    def __post_init__(self):
        if self.pad_h < 0 or self.pad_w < 0:
            raise InvalidShape("padding must be non-negative")
        if min(self.stride_h, self.stride_w, self.dilation_h, self.dilation_w, self.group_count) < 1:
            raise InvalidShape("stride, dilation and group count must be positive")
        if self.mode is ConvMode.TRANSPOSE and (self.dilation_h, self.dilation_w) != (1, 1):
            raise InvalidShape("transpose convolution requires dilation 1")


def _out_extent(size: int, pad: int, dil: int, filt: int, stride: int) -> int:
    return (size + 2 * pad - dil * (filt - 1) - 1) // stride + 1


def output_dims(input_desc: TensorDescriptor, filter_desc: TensorDescriptor, conv: ConvDescriptor) -> TensorDescriptor:
    """Output descriptor of a convolution.

    Forward mode takes a ``[K, C/groups, Y, X]`` filter. Transpose mode takes
    a ``[C, K/groups, Y, X]`` filter, the layout of the forward convolution
    it inverts, and produces ``[N, K, H', W']``.
    """
    if input_desc.ndim != 4 or filter_desc.ndim != 4:
        raise InvalidShape("input and filter must be 4-D NCHW")
    n, c, h, w = input_desc.dims
    f0, f1, y, x = filter_desc.dims
    g = conv.group_count
    if conv.mode is ConvMode.CONVOLUTION:
        k = f0
        if c % g or k % g:
            raise GroupMismatch(f"group count {g} must divide C={c} and K={k}")
        if f1 * g != c:
            raise ShapeMismatch(f"filter expects {f1 * g} input channels, input has {c}")
        oh = _out_extent(h, conv.pad_h, conv.dilation_h, y, conv.stride_h)
        ow = _out_extent(w, conv.pad_w, conv.dilation_w, x, conv.stride_w)
    else:
        k = f1 * g
        if c % g:
            raise GroupMismatch(f"group count {g} must divide C={c}")
        if f0 != c:
            raise ShapeMismatch(f"transpose filter expects {f0} input channels, input has {c}")
        oh = conv.stride_h * (h - 1) + y - 2 * conv.pad_h
        ow = conv.stride_w * (w - 1) + x - 2 * conv.pad_w
    if oh < 1 or ow < 1:
        raise InvalidShape(f"output extent {oh}x{ow} is empty")
    return TensorDescriptor((n, k, oh, ow), etype=input_desc.etype)


_DIR_TAGS = {d.value: d for d in ConvDirection}
_MODE_TAGS = {m.value: m for m in ConvMode}


@dataclass(frozen=True)
class ConvProblem:
    """Canonical, hashable description of one convolution instance.

    ``n, c, h, w`` describe the input of the forward map and ``k`` its
    output channels, whatever ``direction`` is being computed.
    """

    n: int
    c: int
    h: int
    w: int
    k: int
    y: int
    x: int
    pad_h: int = 0
    pad_w: int = 0
    stride_h: int = 1
    stride_w: int = 1
    dilation_h: int = 1
    dilation_w: int = 1
    groups: int = 1
    direction: ConvDirection = ConvDirection.FORWARD
    mode: ConvMode = ConvMode.CONVOLUTION
    etype: ElementType = ElementType.F32

    def __post_init__(self):
        # validates extents and group divisibility
        output_dims(self.input_desc, self.filter_desc, self.conv_desc)

    @classmethod
    def from_descriptors(
        cls,
        input_desc: TensorDescriptor,
        filter_desc: TensorDescriptor,
        conv: ConvDescriptor,
        direction: ConvDirection = ConvDirection.FORWARD,
    ) -> "ConvProblem":
        output_dims(input_desc, filter_desc, conv)  # validates channels, groups and extents
        n, c, h, w = input_desc.dims
        f0, f1, y, x = filter_desc.dims
        k = f0 if conv.mode is ConvMode.CONVOLUTION else f1 * conv.group_count
        return cls(
            n, c, h, w, k, y, x,
            conv.pad_h, conv.pad_w, conv.stride_h, conv.stride_w, conv.dilation_h, conv.dilation_w,
            conv.group_count, direction, conv.mode, input_desc.etype,
        )

    @property
    def conv_desc(self) -> ConvDescriptor:
        return ConvDescriptor(
            self.pad_h, self.pad_w, self.stride_h, self.stride_w,
            self.dilation_h, self.dilation_w, self.mode, self.groups,
        )

    @property
    def input_desc(self) -> TensorDescriptor:
        return TensorDescriptor((self.n, self.c, self.h, self.w), etype=self.etype)

    @property
    def filter_desc(self) -> TensorDescriptor:
        if self.mode is ConvMode.CONVOLUTION:
            dims = (self.k, self.c // max(self.groups, 1), self.y, self.x)
        else:
            dims = (self.c, self.k // max(self.groups, 1), self.y, self.x)
        return TensorDescriptor(dims, etype=self.etype)

    @property
    def output_desc(self) -> TensorDescriptor:
        return output_dims(self.input_desc, self.filter_desc, self.conv_desc)

    @property
    def out_h(self) -> int:
        return self.output_desc.dims[2]

    @property
    def out_w(self) -> int:
        return self.output_desc.dims[3]

    @property
    def is_transpose(self) -> bool:
        return self.mode is ConvMode.TRANSPOSE

    def key(self) -> str:
        fields = (
            self.n, self.c, self.h, self.w, self.k, self.y, self.x,
            self.pad_h, self.pad_w, self.stride_h, self.stride_w,
            self.dilation_h, self.dilation_w, self.groups,
        )
        return "-".join(str(v) for v in fields) + f"-{self.direction.value}-{self.mode.value}-{self.etype.value}"

    @classmethod
    def from_key(cls, key: str) -> "ConvProblem":
        parts = key.strip().split("-")
        if len(parts) != 17:
            raise ValueError(f"problem key needs 17 fields, got {len(parts)}: {key!r}")
        nums = [int(p) for p in parts[:14]]
        try:
            direction = _DIR_TAGS[parts[14]]
            mode = _MODE_TAGS[parts[15]]
        except KeyError as exc:
            raise ValueError(f"bad direction/mode tag in {key!r}") from exc
        etype = ElementType.parse(parts[16])
        return cls(*nums, direction=direction, mode=mode, etype=etype)

    def with_direction(self, direction: ConvDirection) -> "ConvProblem":
        return replace(self, direction=direction)

    def forward_equivalent(self) -> tuple["ConvProblem", ConvDirection]:
        """Express a transpose problem as a forward-mode problem and direction.

        Transposed convolution is the data-gradient of the forward
        convolution that maps the transpose output back to its input.
        """
        if not self.is_transpose:
            return self, self.direction
        oh, ow = self.out_h, self.out_w
        fwd = ConvProblem(
            self.n, self.k, oh, ow, self.c, self.y, self.x,
            self.pad_h, self.pad_w, self.stride_h, self.stride_w, 1, 1,
            self.groups, ConvDirection.FORWARD, ConvMode.CONVOLUTION, self.etype,
        )
        swapped = {
            ConvDirection.FORWARD: ConvDirection.BACKWARD_DATA,
            ConvDirection.BACKWARD_DATA: ConvDirection.FORWARD,
            ConvDirection.BACKWARD_WEIGHTS: ConvDirection.BACKWARD_WEIGHTS,
        }[self.direction]
        return fwd.with_direction(swapped), swapped

    def label(self) -> str:
        """``Y-X-C-H-W-K-padH-padW`` benchmark label."""
        return f"{self.y}-{self.x}-{self.c}-{self.h}-{self.w}-{self.k}-{self.pad_h}-{self.pad_w}"
