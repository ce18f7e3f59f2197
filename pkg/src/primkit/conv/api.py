"""Algorithm dispatch, applicability rules and workspace sizes."""
from __future__ import annotations

import numpy as np

from ..errors import AlgoNotApplicable, ShapeMismatch, WorkspaceTooSmall
from ..tensor import ElementType, OpCounters, Tensor, TensorDescriptor, as_array, round_bf16, wrap_like
from . import direct, fft, im2col, implicit_gemm, winograd
from .problem import ConvAlgo, ConvDescriptor, ConvDirection, ConvMode, ConvProblem, output_dims

__all__ = [
    "applicability",
    "is_applicable",
    "workspace_size",
    "allocate_workspace",
    "execute",
    "conv_forward",
    "conv_backward_data",
    "conv_backward_weights",
]


def applicability(algo: ConvAlgo, p: ConvProblem) -> str | None:
    """``None`` when ``algo`` can run ``p``, otherwise the reason it cannot."""
    if algo in (ConvAlgo.IM2COL_GEMM, ConvAlgo.DIRECT):
        return None
    if p.is_transpose:
        return f"{algo.value} does not service transpose convolution"
    if p.direction is not ConvDirection.FORWARD:
        return f"{algo.value} is forward-only"
    if (p.dilation_h, p.dilation_w) != (1, 1):
        return f"{algo.value} requires dilation 1"
    if algo is ConvAlgo.IMPLICIT_GEMM:
        return None
    if (p.stride_h, p.stride_w) != (1, 1):
        return f"{algo.value} requires stride 1"
    if algo is ConvAlgo.WINOGRAD and (p.y, p.x) != (3, 3):
        return "Winograd F(2x2,3x3) requires a 3x3 filter"
    return None


def is_applicable(algo: ConvAlgo, p: ConvProblem) -> bool:
    return applicability(algo, p) is None


def _column_bytes(p: ConvProblem) -> int:
    fwd, _ = p.forward_equivalent()
    cg = fwd.c // fwd.groups
    return 4 * im2col.column_matrix_elems(cg, fwd.y, fwd.x, fwd.out_h, fwd.out_w)


def workspace_size(algo: ConvAlgo, p: ConvProblem) -> int:
    reason = applicability(algo, p)
    if reason is not None:
        raise AlgoNotApplicable(reason)
    if algo is ConvAlgo.IM2COL_GEMM:
        return _column_bytes(p)
    if algo is ConvAlgo.FFT:
        return fft.workspace_bytes(p.n, p.c, p.h, p.w, p.k, p.y, p.x, p.conv_desc)
    return 0


def allocate_workspace(nbytes: int) -> np.ndarray:
    return np.zeros(int(nbytes), dtype=np.uint8)


def _workspace_len(workspace) -> int:
    if workspace is None:
        return 0
    return memoryview(workspace).nbytes


def execute(
    algo: ConvAlgo,
    p: ConvProblem,
    a: np.ndarray,
    b: np.ndarray,
    workspace=None,
    counters: OpCounters | None = None,
    config: implicit_gemm.TileConfig | None = None,
    taps: np.ndarray | None = None,
) -> np.ndarray:
    """Run one problem on raw arrays.

    Operands by direction: forward ``(x, w)``, backward-data ``(dy, w)``,
    backward-weights ``(dy, x)``. ``workspace=None`` lets the algorithm
    allocate its own scratch; a given buffer must be large enough.
    """
    reason = applicability(algo, p)
    if reason is not None:
        raise AlgoNotApplicable(reason)
    if workspace is not None:
        need = workspace_size(algo, p)
        if _workspace_len(workspace) < need:
            raise WorkspaceTooSmall(need, _workspace_len(workspace))
    fwd, direction = p.forward_equivalent()
    conv = fwd.conv_desc
    if p.is_transpose and direction is ConvDirection.BACKWARD_WEIGHTS:
        # d<T(x, w), dOut>/dw is the forward weight gradient with roles swapped
        a, b = b, a
    if direction is ConvDirection.FORWARD:
        x, w = a, b
        if algo is ConvAlgo.DIRECT:
            out = direct.forward(x, w, conv, counters)
        elif algo is ConvAlgo.IM2COL_GEMM:
            out = im2col.forward(x, w, conv, workspace, counters, taps=taps)
        elif algo is ConvAlgo.WINOGRAD:
            out = winograd.forward(x, w, conv, counters)
        elif algo is ConvAlgo.FFT:
            out = fft.forward(x, w, conv, workspace)
        else:
            cfg = config or implicit_gemm.default_config(fwd.k // fwd.groups, fwd.c // fwd.groups)
            out = implicit_gemm.forward(x, w, conv, cfg, counters)
    elif direction is ConvDirection.BACKWARD_DATA:
        dy, w = a, b
        in_hw = (fwd.h, fwd.w)
        if algo is ConvAlgo.DIRECT:
            out = direct.backward_data(dy, w, conv, in_hw, counters)
        else:
            out = im2col.backward_data(dy, w, conv, in_hw, workspace, counters)
    else:
        dy, x = a, b
        fyx = (fwd.y, fwd.x)
        if algo is ConvAlgo.DIRECT:
            out = direct.backward_weights(dy, x, conv, fyx, counters)
        else:
            out = im2col.backward_weights(dy, x, conv, fyx, workspace, counters)
    if counters is not None:
        counters.kernel_runs += 1
    return out


def _check(arr: np.ndarray, desc: TensorDescriptor, what: str) -> None:
    if arr.shape != desc.dims:
        raise ShapeMismatch(f"{what} has shape {arr.shape}, expected {desc.dims}")


def _etype(*tensors) -> ElementType:
    for t in tensors:
        if isinstance(t, Tensor) and t.etype is ElementType.BF16:
            return ElementType.BF16
    return ElementType.F32


def _desc(shape, etype: ElementType) -> TensorDescriptor:
    if len(shape) != 4:
        raise ShapeMismatch(f"expected a 4-D NCHW tensor, got shape {tuple(shape)}")
    return TensorDescriptor(tuple(shape), etype=etype)


def conv_forward(algo: ConvAlgo, input, filter, conv: ConvDescriptor, workspace=None,
                 counters: OpCounters | None = None, config=None):
    x, w = as_array(input), as_array(filter)
    et = _etype(input, filter)
    p = ConvProblem.from_descriptors(_desc(x.shape, et), _desc(w.shape, et), conv, ConvDirection.FORWARD)
    out = execute(algo, p, x, w, workspace, counters, config)
    return wrap_like(out, input, filter)


def conv_backward_data(algo: ConvAlgo, d_output, filter, conv: ConvDescriptor, workspace=None,
                       counters: OpCounters | None = None, input_dims: tuple[int, ...] | None = None):
    """Gradient of the forward map with respect to its input.

    ``input_dims`` disambiguates the input extent when stride > 1; by default
    the smallest input producing ``d_output``'s extent is assumed.
    """
    dy, w = as_array(d_output), as_array(filter)
    et = _etype(d_output, filter)
    if input_dims is None:
        input_dims = _infer_input_dims(dy.shape, w.shape, conv)
    p = ConvProblem.from_descriptors(_desc(input_dims, et), _desc(w.shape, et), conv, ConvDirection.BACKWARD_DATA)
    _check(dy, p.output_desc, "dOutput")
    out = execute(algo, p, dy, w, workspace, counters)
    return wrap_like(out, d_output, filter)


def conv_backward_weights(algo: ConvAlgo, d_output, input, conv: ConvDescriptor, workspace=None,
                          counters: OpCounters | None = None, filter_dims: tuple[int, ...] | None = None):
    """Gradient of the forward map with respect to the filter.

    ``filter_dims`` disambiguates the filter extent when stride > 1.
    """
    dy, x = as_array(d_output), as_array(input)
    et = _etype(d_output, input)
    if filter_dims is None:
        filter_dims = _infer_filter_dims(dy.shape, x.shape, conv)
    p = ConvProblem.from_descriptors(_desc(x.shape, et), _desc(filter_dims, et), conv, ConvDirection.BACKWARD_WEIGHTS)
    _check(dy, p.output_desc, "dOutput")
    out = execute(algo, p, dy, x, workspace, counters)
    return wrap_like(out, d_output, input)


def _infer_input_dims(dy_shape, w_shape, conv: ConvDescriptor) -> tuple[int, ...]:
    n, k, oh, ow = dy_shape
    f0, f1, fy, fx = w_shape
    g = conv.group_count
    if conv.mode is ConvMode.CONVOLUTION:
        h = (oh - 1) * conv.stride_h + conv.dilation_h * (fy - 1) + 1 - 2 * conv.pad_h
        w = (ow - 1) * conv.stride_w + conv.dilation_w * (fx - 1) + 1 - 2 * conv.pad_w
        return (n, f1 * g, h, w)
    # transpose output extent is exact, so invert it
    h = (oh + 2 * conv.pad_h - fy) // conv.stride_h + 1
    w = (ow + 2 * conv.pad_w - fx) // conv.stride_w + 1
    return (n, f0, h, w)


def _infer_filter_dims(dy_shape, x_shape, conv: ConvDescriptor) -> tuple[int, ...]:
    n, k, oh, ow = dy_shape
    _, c, h, w = x_shape
    g = conv.group_count
    if conv.mode is ConvMode.CONVOLUTION:
        fy = (h + 2 * conv.pad_h - 1 - (oh - 1) * conv.stride_h) // conv.dilation_h + 1
        fx = (w + 2 * conv.pad_w - 1 - (ow - 1) * conv.stride_w) // conv.dilation_w + 1
        return (k, c // g, fy, fx)
    fy = oh - conv.stride_h * (h - 1) + 2 * conv.pad_h
    fx = ow - conv.stride_w * (w - 1) + 2 * conv.pad_w
    return (c, k // g, fy, fx)


def output_shape(input_desc: TensorDescriptor, filter_desc: TensorDescriptor, conv: ConvDescriptor):
    return output_dims(input_desc, filter_desc, conv).dims


def operand_shapes(p: ConvProblem) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Shapes of the two operands :func:`execute` takes for ``p.direction``."""
    x, w, y = p.input_desc.dims, p.filter_desc.dims, p.output_desc.dims
    if p.direction is ConvDirection.FORWARD:
        return x, w
    if p.direction is ConvDirection.BACKWARD_DATA:
        return y, w
    return y, x


def random_operands(p: ConvProblem, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a_shape, b_shape = operand_shapes(p)
    a = rng.standard_normal(a_shape).astype(np.float32)
    b = rng.standard_normal(b_shape).astype(np.float32)
    if p.etype is ElementType.BF16:
        a, b = round_bf16(a), round_bf16(b)
    return a, b
