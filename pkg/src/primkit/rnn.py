"""Vanilla RNN and LSTM layers built on the counted GEMM.

Sequences are dense ``[T, B, D]`` arrays plus a ``SeqBatchLayout`` whose
non-increasing ``batch_sizes`` say how many leading rows are live at each
step. Live rows are packed step after step into a ``[sum(b_t), D]``
matrix, so the input transform is a single GEMM for any layout.

Gate pre-activations are stored row-major as ``[rows, G*H]`` with LSTM
gate blocks ordered input, forget, output, cell; this is the transpose of
the column-stacked ``[G*H, rows]`` form, so every GEMM here multiplies the
same operands in the other orientation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidShape, LayoutNotDescending, ShapeMismatch
from .primitives.activation import sigmoid
from .tensor import OpCounters, as_array, gemm


class RnnCell(enum.Enum):
    VANILLA_RELU = "relu"
    VANILLA_TANH = "tanh"
    LSTM = "lstm"

    @property
    def gates(self) -> int:
        return 4 if self is RnnCell.LSTM else 1


class RnnDirection(enum.Enum):
    UNIDIRECTIONAL = "uni"
    BIDIRECTIONAL = "bi"

    @property
    def count(self) -> int:
        return 2 if self is RnnDirection.BIDIRECTIONAL else 1


class RnnInputMode(enum.Enum):
    LINEAR = "linear"
    SKIP = "skip"


class RnnBiasMode(enum.Enum):
    WITH_BIAS = "bias"
    NO_BIAS = "nobias"


@dataclass(frozen=True)
class RnnDescriptor:
    cell: RnnCell
    hidden_size: int
    num_layers: int = 1
    direction: RnnDirection = RnnDirection.UNIDIRECTIONAL
    input_mode: RnnInputMode = RnnInputMode.LINEAR
    bias_mode: RnnBiasMode = RnnBiasMode.WITH_BIAS

    def __post_init__(self):
        if self.hidden_size < 1 or self.num_layers < 1:
            raise InvalidShape("hidden_size and num_layers must be positive")

    @property
    def gates(self) -> int:
        return self.cell.gates

    @property
    def dirs(self) -> int:
        return self.direction.count

    def uses_input_weights(self, layer: int) -> bool:
        return layer > 0 or self.input_mode is RnnInputMode.LINEAR

    def layer_input_size(self, layer: int, input_size: int) -> int:
        return input_size if layer == 0 else self.hidden_size * self.dirs


class RnnWeights(NamedTuple):
    """Per layer and direction: ``W [G*H, D]`` (None in skip mode), ``R [G*H, H]``, ``bias [G*H]``."""

    W: np.ndarray | None
    R: np.ndarray
    bias: np.ndarray | None = None

    def gate(self, g: int, hidden: int) -> "RnnWeights":
        """Row block ``g`` of every matrix."""
        rows = slice(g * hidden, (g + 1) * hidden)
        return RnnWeights(
            None if self.W is None else self.W[rows],
            self.R[rows],
            None if self.bias is None else self.bias[rows],
        )


LstmWeights = RnnWeights


def init_weights(desc: RnnDescriptor, input_size: int, rng: np.random.Generator, scale: float = 0.5, dtype=np.float64):
    """Uniform random weights shaped for ``desc``, as ``[layer][direction]``."""
    gh = desc.gates * desc.hidden_size
    layers = []
    for layer in range(desc.num_layers):
        d = desc.layer_input_size(layer, input_size)
        per_dir = []
        for _ in range(desc.dirs):
            W = rng.uniform(-scale, scale, (gh, d)).astype(dtype) if desc.uses_input_weights(layer) else None
            R = rng.uniform(-scale, scale, (gh, desc.hidden_size)).astype(dtype)
            b = rng.uniform(-scale, scale, gh).astype(dtype) if desc.bias_mode is RnnBiasMode.WITH_BIAS else None
            per_dir.append(RnnWeights(W, R, b))
        layers.append(per_dir)
    return layers


@dataclass(frozen=True)
class SeqBatchLayout:
    batch_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(b) for b in self.batch_sizes)
        object.__setattr__(self, "batch_sizes", sizes)
        if not sizes:
            raise InvalidShape("a sequence needs at least one step")
        if min(sizes) < 1:
            raise InvalidShape("every step needs at least one live row")
        for t in range(1, len(sizes)):
            if sizes[t] > sizes[t - 1]:
                raise LayoutNotDescending(
                    f"batch size grows from {sizes[t - 1]} to {sizes[t]} at step {t}; "
                    "sequences must be sorted longest first"
                )

    @classmethod
    def constant(cls, steps: int, batch: int) -> "SeqBatchLayout":
        return cls((batch,) * steps)

    @property
    def steps(self) -> int:
        return len(self.batch_sizes)

    @property
    def is_constant(self) -> bool:
        return len(set(self.batch_sizes)) == 1

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.batch_sizes)])

    @property
    def total_rows(self) -> int:
        return int(sum(self.batch_sizes))

    def pack(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([x[t, :b] for t, b in enumerate(self.batch_sizes)], axis=0)

    def unpack(self, rows: np.ndarray, batch: int) -> np.ndarray:
        out = np.zeros((self.steps, batch) + rows.shape[1:], dtype=rows.dtype)
        off = self.offsets
        for t, b in enumerate(self.batch_sizes):
            out[t, :b] = rows[off[t]:off[t + 1]]
        return out


@dataclass
class DirectionTrace:
    """What one direction of one layer keeps for the backward pass (all packed)."""

    reverse: bool
    gates: np.ndarray  # post-activation gate values [rows, G*H]
    cell: np.ndarray | None  # c_t [rows, H], LSTM only
    h: np.ndarray  # h_t [rows, H]
    h_prev: np.ndarray  # h_{t-1} per live row [rows, H]
    c_prev: np.ndarray | None


@dataclass
class RnnSaved:
    desc: RnnDescriptor
    layout: SeqBatchLayout
    batch: int
    input_size: int
    layer_inputs: list[np.ndarray] = field(default_factory=list)  # packed inputs per layer
    traces: list[list[DirectionTrace]] = field(default_factory=list)
    nested: bool = True


class RnnOutput(NamedTuple):
    y: np.ndarray
    h_n: np.ndarray
    c_n: np.ndarray | None
    saved: RnnSaved


class RnnWeightGrads(NamedTuple):
    dW: np.ndarray | None
    dR: np.ndarray
    dbias: np.ndarray | None


def _normalize_weights(desc: RnnDescriptor, weights) -> tuple[list[list[RnnWeights]], bool]:
    if isinstance(weights, RnnWeights):
        if desc.num_layers != 1 or desc.dirs != 1:
            raise ShapeMismatch("a single weight set needs one layer and one direction")
        return [[weights]], False
    nested = [list(layer) for layer in weights]
    if len(nested) != desc.num_layers or any(len(layer) != desc.dirs for layer in nested):
        raise ShapeMismatch(f"weights must be [{desc.num_layers} layers][{desc.dirs} directions]")
    return nested, True


def _check_weights(desc: RnnDescriptor, w: RnnWeights, layer: int, d_in: int) -> None:
    gh = desc.gates * desc.hidden_size
    if as_array(w.R).shape != (gh, desc.hidden_size):
        raise ShapeMismatch(f"R has shape {np.shape(w.R)}, expected {(gh, desc.hidden_size)}")
    if desc.uses_input_weights(layer):
        if w.W is None or as_array(w.W).shape != (gh, d_in):
            raise ShapeMismatch(f"W has shape {None if w.W is None else np.shape(w.W)}, expected {(gh, d_in)}")
    elif d_in != desc.hidden_size:
        raise ShapeMismatch(f"skip input mode needs input size == hidden size ({d_in} != {desc.hidden_size})")
    if desc.bias_mode is RnnBiasMode.WITH_BIAS:
        if w.bias is None or as_array(w.bias).shape != (gh,):
            raise ShapeMismatch(f"bias must have shape {(gh,)}")


def _state(arr, desc: RnnDescriptor, batch: int, dtype) -> np.ndarray:
    shape = (desc.num_layers * desc.dirs, batch, desc.hidden_size)
    if arr is None:
        return np.zeros(shape, dtype=dtype)
    a = as_array(arr)
    if a.shape != shape:
        raise ShapeMismatch(f"state has shape {a.shape}, expected {shape}")
    return a


def _step_order(layout: SeqBatchLayout, reverse: bool) -> Sequence[int]:
    return range(layout.steps - 1, -1, -1) if reverse else range(layout.steps)


def _activate(desc: RnnDescriptor, s: np.ndarray) -> np.ndarray:
    """Gate nonlinearities applied in place on ``s`` and returned."""
    hd = desc.hidden_size
    if desc.cell is RnnCell.LSTM:
        # input, forget and output gates share one sigmoid pass
        s[:, : 3 * hd] = sigmoid(s[:, : 3 * hd])
        np.tanh(s[:, 3 * hd:], out=s[:, 3 * hd:])
    elif desc.cell is RnnCell.VANILLA_RELU:
        np.maximum(s, 0, out=s)
    else:
        np.tanh(s, out=s)
    return s


def _run_direction(desc, w: RnnWeights, layout, x_packed, h0, c0, reverse, counters):
    hd = desc.hidden_size
    gh = desc.gates * hd
    rows = layout.total_rows
    off = layout.offsets
    dtype = np.result_type(x_packed.dtype, as_array(w.R).dtype, h0.dtype)
    if w.W is not None:
        s_in = gemm(x_packed, w.W, trans_b=True, counters=counters)
    else:
        s_in = np.tile(x_packed, (1, desc.gates))
    s_in = s_in.astype(dtype, copy=False)
    if w.bias is not None:
        s_in = s_in + as_array(w.bias)

    lstm = desc.cell is RnnCell.LSTM
    gates = np.empty((rows, gh), dtype=dtype)
    h_all = np.empty((rows, hd), dtype=dtype)
    h_prev_all = np.empty((rows, hd), dtype=dtype)
    c_all = np.empty((rows, hd), dtype=dtype) if lstm else None
    c_prev_all = np.empty((rows, hd), dtype=dtype) if lstm else None
    h = h0.astype(dtype, copy=True)
    c = c0.astype(dtype, copy=True) if lstm else None

    for t in _step_order(layout, reverse):
        b = layout.batch_sizes[t]
        r = slice(off[t], off[t + 1])
        s = gemm(h[:b], w.R, s_in[r], trans_b=True, beta=1.0, counters=counters)
        g = _activate(desc, s)
        gates[r] = g
        h_prev_all[r] = h[:b]
        if lstm:
            i, f, o, cc = (g[:, k * hd:(k + 1) * hd] for k in range(4))
            c_prev_all[r] = c[:b]
            c_new = f * c[:b] + i * cc
            c[:b] = c_new
            c_all[r] = c_new
            h[:b] = o * np.tanh(c_new)
        else:
            h[:b] = g
        h_all[r] = h[:b]
    trace = DirectionTrace(reverse, gates, c_all, h_all, h_prev_all, c_prev_all)
    return trace, h, c


def rnn_forward(desc: RnnDescriptor, weights, x, layout: SeqBatchLayout | None = None, h0=None, c0=None,
                counters: OpCounters | None = None) -> RnnOutput:
    """Runs every layer and direction; returns ``(y, h_n, c_n, saved)``.

    ``y`` is ``[T, B, H*dirs]`` with zeros in rows that are not live. ``h_n``
    and ``c_n`` are ``[layers*dirs, B, H]`` holding each row's state after
    its last live step.
    """
    X = as_array(x)
    if X.ndim != 3:
        raise ShapeMismatch(f"input must be [T, B, D], got shape {X.shape}")
    steps, batch, d_in = X.shape
    layout = layout or SeqBatchLayout.constant(steps, batch)
    if layout.steps != steps or layout.batch_sizes[0] > batch:
        raise ShapeMismatch(f"layout {layout.batch_sizes} does not fit input of shape {X.shape}")
    wsets, nested = _normalize_weights(desc, weights)
    dtype = np.result_type(X.dtype, *(as_array(w.R).dtype for ws in wsets for w in ws))
    H0 = _state(h0, desc, batch, dtype)
    lstm = desc.cell is RnnCell.LSTM
    C0 = _state(c0, desc, batch, dtype) if lstm else None
    saved = RnnSaved(desc, layout, batch, d_in, nested=nested)
    h_n = np.empty((desc.num_layers * desc.dirs, batch, desc.hidden_size), dtype=dtype)
    c_n = np.empty_like(h_n) if lstm else None

    inp = layout.pack(X)
    for layer in range(desc.num_layers):
        saved.layer_inputs.append(inp)
        traces = []
        for d in range(desc.dirs):
            w = wsets[layer][d]
            _check_weights(desc, w, layer, inp.shape[1])
            idx = layer * desc.dirs + d
            trace, h, c = _run_direction(desc, w, layout, inp, H0[idx], None if C0 is None else C0[idx], d == 1, counters)
            traces.append(trace)
            h_n[idx] = h
            if lstm:
                c_n[idx] = c
        saved.traces.append(traces)
        inp = np.concatenate([tr.h for tr in traces], axis=1)
    y = layout.unpack(inp, batch)
    return RnnOutput(y, h_n, c_n, saved)


def _direction_backward(desc, w: RnnWeights, layout, trace: DirectionTrace, dy_rows, dh_n, dc_n, counters):
    """Gate errors for one direction; returns ``(delta_s, dh0, dc0)``."""
    hd = desc.hidden_size
    off = layout.offsets
    dtype = trace.gates.dtype
    delta = np.empty_like(trace.gates)
    lstm = desc.cell is RnnCell.LSTM
    # rows that are not live keep their carried error until their last live step
    dh = dh_n.astype(dtype, copy=True)
    dc = dc_n.astype(dtype, copy=True) if lstm else None
    for t in _step_order(layout, not trace.reverse):
        b = layout.batch_sizes[t]
        r = slice(off[t], off[t + 1])
        dh_t = dh[:b] + dy_rows[r]
        g = trace.gates[r]
        if lstm:
            i, f, o, cc = (g[:, k * hd:(k + 1) * hd] for k in range(4))
            tc = np.tanh(trace.cell[r])
            dc_t = dc[:b] + dh_t * o * (1 - tc * tc)
            ds = delta[r]
            ds[:, 0:hd] = dc_t * cc * i * (1 - i)
            ds[:, hd:2 * hd] = dc_t * trace.c_prev[r] * f * (1 - f)
            ds[:, 2 * hd:3 * hd] = dh_t * tc * o * (1 - o)
            ds[:, 3 * hd:] = dc_t * i * (1 - cc * cc)
            dc[:b] = dc_t * f
        elif desc.cell is RnnCell.VANILLA_RELU:
            delta[r] = np.where(g > 0, dh_t, 0)
        else:
            delta[r] = dh_t * (1 - g * g)
        dh[:b] = gemm(delta[r], w.R, counters=counters)
    return delta, dh, dc


def rnn_backward_data(desc: RnnDescriptor, weights, saved: RnnSaved, dy, dh_n=None, dc_n=None,
                      counters: OpCounters | None = None):
    """Returns ``(dx, dh0, dc0, delta_s)``.

    ``delta_s[layer][direction]`` holds the packed gate-error rows
    ``[rows, G*H]`` in the order of the forward packing.
    """
    wsets, _ = _normalize_weights(desc, weights)
    layout, batch = saved.layout, saved.batch
    dY = as_array(dy)
    want = (layout.steps, batch, desc.hidden_size * desc.dirs)
    if dY.shape != want:
        raise ShapeMismatch(f"dy has shape {dY.shape}, expected {want}")
    dtype = saved.traces[0][0].gates.dtype
    dHn = _state(dh_n, desc, batch, dtype)
    lstm = desc.cell is RnnCell.LSTM
    dCn = _state(dc_n, desc, batch, dtype) if lstm else None
    dh0 = np.empty_like(dHn)
    dc0 = np.empty_like(dHn) if lstm else None
    deltas: list[list[np.ndarray]] = [[] for _ in range(desc.num_layers)]

    d_rows = layout.pack(dY).astype(dtype, copy=False)
    hd = desc.hidden_size
    for layer in range(desc.num_layers - 1, -1, -1):
        d_in = saved.layer_inputs[layer].shape[1]
        d_below = np.zeros((layout.total_rows, d_in), dtype=dtype)
        for d in range(desc.dirs):
            idx = layer * desc.dirs + d
            w = wsets[layer][d]
            delta, dh, dc = _direction_backward(
                desc, w, layout, saved.traces[layer][d], d_rows[:, d * hd:(d + 1) * hd],
                dHn[idx], None if dCn is None else dCn[idx], counters,
            )
            deltas[layer].append(delta)
            dh0[idx] = dh
            if lstm:
                dc0[idx] = dc
            if w.W is not None:
                d_below += gemm(delta, w.W, counters=counters)
            else:
                d_below += delta.reshape(delta.shape[0], desc.gates, hd).sum(axis=1)
        d_rows = d_below
    dx = layout.unpack(d_rows, batch)
    return dx, dh0, dc0, deltas


def rnn_backward_weights(desc: RnnDescriptor, saved: RnnSaved, delta_s, x=None, layout: SeqBatchLayout | None = None,
                         counters: OpCounters | None = None):
    """Weight gradients from the gate errors of ``rnn_backward_data``.

    With a constant batch the input and recurrent updates are one GEMM each.
    When the batch shrinks over time the recurrent update is one GEMM per
    step, aligned to that step's live rows. Returns ``RnnWeightGrads`` in
    the same nesting as the forward weights.
    """
    layout = layout or saved.layout
    if layout != saved.layout:
        raise ShapeMismatch("layout differs from the forward call")
    if x is not None:
        X = as_array(x)
        if X.shape != (layout.steps, saved.batch, saved.input_size):
            raise ShapeMismatch(f"x has shape {X.shape}, forward saw {(layout.steps, saved.batch, saved.input_size)}")
        inputs = [layout.pack(X)] + saved.layer_inputs[1:]
    else:
        inputs = saved.layer_inputs
    off = layout.offsets
    with_bias = desc.bias_mode is RnnBiasMode.WITH_BIAS
    grads = []
    for layer in range(desc.num_layers):
        per_dir = []
        for d in range(desc.dirs):
            delta = delta_s[layer][d]
            trace = saved.traces[layer][d]
            dW = gemm(delta, inputs[layer], trans_a=True, counters=counters) if desc.uses_input_weights(layer) else None
            if layout.is_constant:
                dR = gemm(delta, trace.h_prev, trans_a=True, counters=counters)
            else:
                dR = np.zeros((delta.shape[1], desc.hidden_size), dtype=delta.dtype)
                for t in range(layout.steps):
                    r = slice(off[t], off[t + 1])
                    dR = gemm(delta[r], trace.h_prev[r], dR, trans_a=True, beta=1.0, counters=counters)
            dbias = delta.sum(axis=0) if with_bias else None
            per_dir.append(RnnWeightGrads(dW, dR, dbias))
        grads.append(per_dir)
    return grads if saved.nested else grads[0][0]


def _require_cell(desc: RnnDescriptor, lstm: bool) -> None:
    if (desc.cell is RnnCell.LSTM) != lstm:
        want = "an LSTM" if lstm else "a vanilla"
        raise ShapeMismatch(f"descriptor cell {desc.cell.value} is not {want} cell")


def lstm_forward(desc, weights, x, layout=None, h0=None, c0=None, counters=None) -> RnnOutput:
    _require_cell(desc, True)
    return rnn_forward(desc, weights, x, layout, h0, c0, counters)


def lstm_backward_data(desc, weights, saved, dy, dh_n=None, dc_n=None, counters=None):
    _require_cell(desc, True)
    return rnn_backward_data(desc, weights, saved, dy, dh_n, dc_n, counters)


def lstm_backward_weights(desc, saved, delta_s, x=None, layout=None, counters=None):
    _require_cell(desc, True)
    return rnn_backward_weights(desc, saved, delta_s, x, layout, counters)


def vanilla_rnn_forward(desc, weights, x, layout=None, h0=None, counters=None) -> RnnOutput:
    _require_cell(desc, False)
    return rnn_forward(desc, weights, x, layout, h0, None, counters)


def vanilla_rnn_backward(desc, weights, saved, dy, dh_n=None, counters=None):
    """Returns ``(dx, dW, dR, dbias, dh0)``; the weight terms follow the forward nesting."""
    _require_cell(desc, False)
    dx, dh0, _, deltas = rnn_backward_data(desc, weights, saved, dy, dh_n, None, counters)
    grads = rnn_backward_weights(desc, saved, deltas, counters=counters)
    if saved.nested:
        dW = [[g.dW for g in layer] for layer in grads]
        dR = [[g.dR for g in layer] for layer in grads]
        db = [[g.dbias for g in layer] for layer in grads]
        return dx, dW, dR, db, dh0
    return dx, grads.dW, grads.dR, grads.dbias, dh0
