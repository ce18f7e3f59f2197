"""Fusion plans: build an op sequence, compile it once, execute it many times.

The fused executor runs the convolution into the output buffer and then
applies bias, batch norm and activation in place, one image at a time, so
intermediate results make a single trip through memory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from ..conv import direct, winograd
from ..conv.api import is_applicable
from ..conv.problem import ConvAlgo, ConvDescriptor, ConvDirection, ConvMode, ConvProblem, output_dims
from ..errors import AlreadyCompiled, FusionNotSupported, MissingArgs, NotCompiled, ShapeMismatch
from ..primitives import activation as act
from ..primitives.batchnorm import BatchNormMode, BatchNormParams, batchnorm_forward_infer
from ..tensor import ElementType, OpCounters, Tensor, TensorDescriptor, TensorOpKind, as_array, round_bf16, tensor_op
from ..tuning import cache_key
from .graph import ACTIVATION, BATCHNORM, BIAS, CONV, METADATA_GRAPH, OpAttrs, PlanContext, Verdict


@dataclass(frozen=True)
class ConvForwardOp:
    conv: ConvDescriptor
    filter_desc: TensorDescriptor
    algo: ConvAlgo | None = None
    kind = CONV


@dataclass(frozen=True)
class BiasOp:
    channels: int | None = None
    kind = BIAS


@dataclass(frozen=True)
class BatchNormInferenceOp:
    mode: BatchNormMode = BatchNormMode.SPATIAL
    kind = BATCHNORM


@dataclass(frozen=True)
class ActivationOp:
    mode: act.ActivationMode
    kind = ACTIVATION


FusionOp = Union[ConvForwardOp, BiasOp, BatchNormInferenceOp, ActivationOp]


@dataclass
class ConvArgs:
    filter: np.ndarray


@dataclass
class BiasArgs:
    bias: np.ndarray  # [K] or [1, K, 1, 1]


@dataclass
class BatchNormArgs:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5


@dataclass
class ActivationArgs:
    alpha: float = act.DEFAULT_LEAKY_ALPHA


_ARG_TYPES = {CONV: ConvArgs, BIAS: BiasArgs, BATCHNORM: BatchNormArgs, ACTIVATION: ActivationArgs}


def _op_attrs(op: FusionOp, in_dims: tuple[int, ...]) -> OpAttrs:
    if isinstance(op, ConvForwardOp):
        c = op.conv
        _, _, fy, fx = op.filter_desc.dims
        return OpAttrs(
            CONV, fy, fx, c.stride_h, c.stride_w, c.pad_h, c.pad_w, c.dilation_h, c.dilation_w,
            channels=in_dims[1] // c.group_count, algo=op.algo,
        )
    if isinstance(op, ActivationOp):
        return OpAttrs(ACTIVATION, activation=op.mode)
    return OpAttrs(op.kind)


def _op_spec(op: FusionOp) -> dict:
    if isinstance(op, ConvForwardOp):
        c = op.conv
        return {
            "kind": CONV,
            "conv": [c.pad_h, c.pad_w, c.stride_h, c.stride_w, c.dilation_h, c.dilation_w, c.mode.value, c.group_count],
            "filter": list(op.filter_desc.dims),
            "algo": op.algo.value if op.algo else None,
        }
    if isinstance(op, BatchNormInferenceOp):
        return {"kind": BATCHNORM, "mode": op.mode.value}
    if isinstance(op, ActivationOp):
        return {"kind": ACTIVATION, "mode": op.mode.value}
    return {"kind": BIAS}


class FusedKernel:
    """Compiled executor for one supported op sequence."""

    def __init__(self, kernel: str, algo: ConvAlgo | None, ops: Sequence[FusionOp], specs: list[dict]):
        self.kernel = kernel
        self.algo = algo
        self.ops = tuple(ops)
        self.specs = specs

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"kernel": np.array(json.dumps({"kernel": self.kernel, "algo": self.algo.value if self.algo else None,
                                               "ops": self.specs}, sort_keys=True))}

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray], ops: Sequence[FusionOp], specs: list[dict]) -> "FusedKernel":
        stored = json.loads(str(payload["kernel"]))
        if stored["ops"] != specs:
            raise ValueError("stored fused kernel describes a different op sequence")
        return cls(stored["kernel"], ConvAlgo(stored["algo"]) if stored["algo"] else None, ops, specs)

    def _conv(self, x: np.ndarray, w: np.ndarray, conv: ConvDescriptor) -> np.ndarray:
        if self.algo is ConvAlgo.WINOGRAD and w.shape[2:] == (3, 3) and (conv.stride_h, conv.stride_w) == (1, 1):
            return winograd.forward(x, w, conv)
        return direct.forward(x, w, conv)

    def run(self, x: np.ndarray, args: Sequence, etype: ElementType) -> np.ndarray:
        out = x
        scale = shift = None
        mode = None
        alpha = act.DEFAULT_LEAKY_ALPHA
        for op, a in zip(self.ops, args):
            if isinstance(op, ConvForwardOp):
                out = self._conv(x, as_array(a.filter), op.conv)
            elif isinstance(op, BiasOp):
                b = _bias_vector(a.bias).reshape(1, -1, 1, 1)
                shift = b if shift is None else shift + b
            elif isinstance(op, BatchNormInferenceOp):
                invstd = 1.0 / np.sqrt(as_array(a.var) + a.epsilon)
                s = as_array(a.gamma) * invstd
                base = -as_array(a.mean) if shift is None else shift - as_array(a.mean)
                scale = s
                shift = base * s + as_array(a.beta)
            else:
                mode = op.mode
                alpha = a.alpha
        if out is x:
            out = x.copy()
        # epilogue over one image at a time while its output is still hot
        for n in range(out.shape[0]):
            tile = out[n : n + 1]
            if scale is not None:
                tile *= scale.astype(tile.dtype, copy=False)
            if shift is not None:
                tile += np.asarray(shift, dtype=tile.dtype)
            if mode is not None:
                act.apply(mode, tile, alpha, out=tile)
        if etype is ElementType.BF16:
            out = round_bf16(out)
        return out


def _bias_vector(b) -> np.ndarray:
    arr = as_array(b)
    return arr.reshape(-1)


class FusionPlan:
    """An ordered op sequence over a fixed input descriptor."""

    def __init__(self, input_desc: TensorDescriptor, etype: ElementType | None = None):
        self.input_desc = input_desc
        self.etype = etype or input_desc.etype
        self.ops: list[FusionOp] = []
        self._dims: list[tuple[int, ...]] = [tuple(input_desc.dims)]
        self._kernel: FusedKernel | None = None
        self._args: list | None = None
        self.verdict: Verdict | None = None

    @property
    def is_compiled(self) -> bool:
        return self._kernel is not None

    @property
    def output_dims(self) -> tuple[int, ...]:
        return self._dims[-1]

    @property
    def sequence(self) -> str:
        return "".join(op.kind for op in self.ops)

    def add_op(self, op: FusionOp) -> "FusionPlan":
        if self.is_compiled:
            raise AlreadyCompiled("cannot add ops to a compiled fusion plan")
        dims = self.output_dims
        if len(dims) != 4:
            raise ShapeMismatch(f"fusion needs NCHW tensors, got {dims}")
        if isinstance(op, ConvForwardOp):
            if op.conv.mode is not ConvMode.CONVOLUTION:
                raise FusionNotSupported("transpose convolution has no fused kernel")
            fdims = tuple(op.filter_desc.dims)
            if dims[1] != fdims[1] * op.conv.group_count:
                raise ShapeMismatch(f"filter {fdims} with {op.conv.group_count} groups does not fit {dims[1]} input channels")
            cur = output_dims(TensorDescriptor(dims), op.filter_desc, op.conv).dims
        elif isinstance(op, BiasOp):
            if op.channels is not None and op.channels != dims[1]:
                raise ShapeMismatch(f"bias has {op.channels} channels, tensor has {dims[1]}")
            cur = dims
        elif isinstance(op, (BatchNormInferenceOp, ActivationOp)):
            cur = dims
        else:
            raise TypeError(f"unknown fusion op {op!r}")
        self.ops.append(op)
        self._dims.append(tuple(cur))
        return self

    def attrs(self) -> list[OpAttrs]:
        return [_op_attrs(op, self._dims[i]) for i, op in enumerate(self.ops)]

    def check_support(self) -> Verdict:
        ctx = PlanContext(self.etype, self.input_desc.is_packed)
        return METADATA_GRAPH.traverse(self.attrs(), ctx)

    def cache_descriptor(self) -> dict:
        return {
            "fusion": [_op_spec(op) for op in self.ops],
            "input": list(self.input_desc.dims),
            "strides": list(self.input_desc.strides),
            "etype": self.etype.value,
        }

    def compile(self, handle) -> "FusionPlan":
        if self.is_compiled:
            return self
        verdict = self.check_support()
        self.verdict = verdict
        if not verdict.accepted:
            raise FusionNotSupported(verdict.reason)
        desc = self.cache_descriptor()
        specs = desc["fusion"]
        key = cache_key("fusion", json.dumps(desc, sort_keys=True))
        ops = list(self.ops)
        self._kernel = handle.cache.get_or_build(
            key,
            desc,
            build=lambda: FusedKernel(verdict.kernel, verdict.algo, ops, specs),
            load=lambda payload: FusedKernel.from_payload(payload, ops, specs),
        )
        return self

    @property
    def kernel(self) -> FusedKernel:
        if self._kernel is None:
            raise NotCompiled("compile the fusion plan first")
        return self._kernel

    def validate_args(self, args: Sequence) -> list:
        args = list(args)
        if len(args) != len(self.ops):
            raise MissingArgs(f"plan has {len(self.ops)} ops, got {len(args)} argument bindings")
        for i, (op, a) in enumerate(zip(self.ops, args)):
            want = _ARG_TYPES[op.kind]
            if a is None:
                raise MissingArgs(f"op {i} ({op.kind}) has no argument binding")
            if not isinstance(a, want):
                raise MissingArgs(f"op {i} ({op.kind}) needs {want.__name__}, got {type(a).__name__}")
            out_c = self._dims[i + 1][1]
            if isinstance(a, ConvArgs) and as_array(a.filter).shape != tuple(op.filter_desc.dims):
                raise ShapeMismatch(f"filter has shape {as_array(a.filter).shape}, plan expects {tuple(op.filter_desc.dims)}")
            if isinstance(a, BiasArgs) and _bias_vector(a.bias).size != out_c:
                raise ShapeMismatch(f"bias has {_bias_vector(a.bias).size} values, tensor has {out_c} channels")
            if isinstance(a, BatchNormArgs):
                want_shape = op.mode.param_shape(self._dims[i])
                for name in ("gamma", "beta", "mean", "var"):
                    got = as_array(getattr(a, name)).shape
                    if got != want_shape:
                        raise ShapeMismatch(f"batch norm {name} has shape {got}, expected {want_shape}")
        return args

    def set_args(self, args: Sequence) -> None:
        self._args = self.validate_args(args)

    def _input(self, x) -> np.ndarray:
        X = as_array(x)
        if X.shape != tuple(self.input_desc.dims):
            raise ShapeMismatch(f"input has shape {X.shape}, plan expects {tuple(self.input_desc.dims)}")
        return X

    def execute(self, handle, x, out=None, args: Sequence | None = None):
        """Run the fused kernel; ``args`` overrides the bound arguments for this call only."""
        kernel = self.kernel
        if args is not None:
            args = self.validate_args(args)
        elif self._args is None:
            raise MissingArgs("set_args must be called before execute")
        else:
            args = self._args
        y = kernel.run(self._input(x), args, self.etype)
        handle.counters.buffer_roundtrips += 1
        handle.counters.kernel_runs += 1
        return _deliver(y, out, x, self.etype)

    def run_unfused(self, handle, x, args: Sequence | None = None):
        """Reference pipeline: each op reads and writes a full tensor."""
        args = self.validate_args(args if args is not None else (self._args or []))
        cur = self._input(x)
        etype = self.etype
        counters: OpCounters = handle.counters
        for op, a in zip(self.ops, args):
            if isinstance(op, ConvForwardOp):
                cur = _unfused_conv(op, cur, as_array(a.filter), self._kernel)
            elif isinstance(op, BiasOp):
                cur = tensor_op(TensorOpKind.ADD, 1.0, cur, 1.0, _bias_vector(a.bias).reshape(1, -1, 1, 1).astype(cur.dtype))
            elif isinstance(op, BatchNormInferenceOp):
                params = BatchNormParams(as_array(a.gamma), as_array(a.beta), as_array(a.mean), as_array(a.var), a.epsilon)
                cur = batchnorm_forward_infer(op.mode, cur, params)
            else:
                cur = act.activation_forward(op.mode, cur, a.alpha)
            if etype is ElementType.BF16:
                cur = round_bf16(cur)
            counters.buffer_roundtrips += 1
            counters.kernel_runs += 1
        return _deliver(cur, None, x, etype)


def _unfused_conv(op: ConvForwardOp, x: np.ndarray, w: np.ndarray, kernel: FusedKernel | None) -> np.ndarray:
    algo = kernel.algo if kernel is not None else op.algo
    if algo is ConvAlgo.WINOGRAD:
        p = ConvProblem.from_descriptors(TensorDescriptor(x.shape), TensorDescriptor(w.shape), op.conv, ConvDirection.FORWARD)
        if is_applicable(ConvAlgo.WINOGRAD, p):
            return winograd.forward(x, w, op.conv)
    return direct.forward(x, w, op.conv)


def _deliver(y: np.ndarray, out, x, etype: ElementType):
    if out is None:
        return Tensor(y, etype) if isinstance(x, Tensor) else y
    target = out.data if isinstance(out, Tensor) else out
    if target.shape != y.shape:
        raise ShapeMismatch(f"output has shape {target.shape}, result has {y.shape}")
    target[...] = y
    return out


def fusion_plan_create(input_desc: TensorDescriptor, etype: ElementType | None = None) -> FusionPlan:
    return FusionPlan(input_desc, etype)


def fusion_add_op(plan: FusionPlan, op: FusionOp) -> None:
    plan.add_op(op)


def fusion_compile(handle, plan: FusionPlan) -> FusionPlan:
    return plan.compile(handle)


def fusion_set_args(plan: FusionPlan, args: Sequence) -> None:
    plan.set_args(args)


def fusion_execute(handle, plan: FusionPlan, x, out=None):
    return plan.execute(handle, x, out)
