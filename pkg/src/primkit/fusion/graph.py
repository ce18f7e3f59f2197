"""Constraint graph deciding which op sequences have a fused kernel.

Nodes are partial sequences; each edge consumes one op kind and carries a
predicate over that op's static attributes and the plan context. A plan is
supported when its ops trace a path from the root to an accepting node on
which every predicate holds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from ..conv.problem import ConvAlgo
from ..primitives.activation import ActivationMode
from ..tensor import ElementType

CONV, BIAS, BATCHNORM, ACTIVATION = "C", "B", "N", "A"

# (stride, smallest filter, largest filter, channel multiplier, needs even c)
WINOGRAD_CHANNEL_RULES = (
    (1, 1, 2, 1, False),
    (1, 3, 3, 1, True),
    (1, 4, 6, 4, False),
    (1, 7, 9, 12, False),
    (1, 10, 12, 16, False),
    (2, 1, 1, 2, False),
    (2, 2, 6, 4, False),
    (2, 7, 7, 12, False),
    (2, 8, 12, 16, False),
)
MIN_WINOGRAD_CHANNELS = 18
CBNA_FILTERS = (3, 5, 7, 9, 11)
WINOGRAD_ACTIVATIONS = (ActivationMode.RELU, ActivationMode.LEAKY_RELU)


@dataclass(frozen=True)
class OpAttrs:
    """Static attributes of one op as the graph sees them."""

    kind: str
    filter_h: int = 0
    filter_w: int = 0
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation_h: int = 1
    dilation_w: int = 1
    channels: int = 0  # input channels per group
    algo: ConvAlgo | None = None  # pinned conv algorithm, None for any
    activation: ActivationMode | None = None


@dataclass(frozen=True)
class PlanContext:
    etype: ElementType
    input_packed: bool = True


Predicate = Callable[[OpAttrs, PlanContext], "str | None"]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str
    predicate: Predicate
    algo: ConvAlgo | None = None


@dataclass
class MetadataGraph:
    root: str = "root"
    edges: list[Edge] = field(default_factory=list)
    accepting: dict[str, str] = field(default_factory=dict)  # node -> fused kernel name

    def add_path(self, name: str, kinds: str, predicates: list[Predicate], algo: ConvAlgo | None = None) -> None:
        src = self.root
        for i, (kind, pred) in enumerate(zip(kinds, predicates)):
            dst = f"{name}:{kinds[: i + 1]}"
            self.edges.append(Edge(src, dst, kind, pred, algo if kind == CONV else None))
            src = dst
        self.accepting[src] = name

    def out_edges(self, node: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node]

    def traverse(self, ops: list[OpAttrs], ctx: PlanContext) -> "Verdict":
        """Depth-first search for an accepting path.

        On rejection the reason lists, for every fusion whose op sequence
        matches the plan, the first constraint that failed along its path.
        """
        seq = _sequence(ops)
        failures: dict[str, str] = {}

        def walk(node: str, depth: int, algo: ConvAlgo | None):
            if depth == len(ops):
                return (self.accepting[node], algo) if node in self.accepting else None
            op = ops[depth]
            for edge in self.out_edges(node):
                if edge.kind != op.kind:
                    continue
                reason = edge.predicate(op, ctx)
                if reason is not None:
                    failures.setdefault(self.row_of(edge), reason)
                    continue
                found = walk(edge.dst, depth + 1, edge.algo or algo)
                if found is not None:
                    return found
            return None

        found = walk(self.root, 0, None)
        if found is not None:
            kernel, algo = found
            return Verdict(True, kernel=kernel, algo=algo)
        rows = [name for name in self.accepting.values() if self.sequence_of(name) == seq]
        if not rows:
            known = ", ".join(sorted({self.sequence_of(n) for n in self.accepting.values()}))
            return Verdict(False, reason=f"no fusion supports the sequence {seq or '(empty)'}; supported: {known}")
        return Verdict(False, reason="; ".join(f"{row}: {failures[row]}" for row in rows if row in failures))

    def row_of(self, edge: Edge) -> str:
        return edge.dst.split(":", 1)[0]

    def sequence_of(self, row: str) -> str:
        for node, name in self.accepting.items():
            if name == row:
                return node.split(":", 1)[1]
        raise KeyError(row)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    kernel: str = ""
    algo: ConvAlgo | None = None
    reason: str = ""


def _sequence(ops: list[OpAttrs]) -> str:
    return "".join(op.kind for op in ops)


def _any(op: OpAttrs, ctx: PlanContext) -> str | None:
    return None


def _pinned(op: OpAttrs, algo: ConvAlgo) -> str | None:
    if op.algo is not None and op.algo is not algo:
        return f"conv algorithm {op.algo.value} requested"
    if (op.dilation_h, op.dilation_w) != (1, 1):
        return "dilation must be 1"
    if op.filter_h != op.filter_w:
        return f"filter {op.filter_h}x{op.filter_w} is not square"
    return None


def _cbna_conv(op: OpAttrs, ctx: PlanContext) -> str | None:
    reason = _pinned(op, ConvAlgo.DIRECT)
    if reason:
        return reason
    if op.filter_h not in CBNA_FILTERS:
        return f"Direct needs a filter in {{3,5,7,9,11}}, got {op.filter_h}x{op.filter_w}"
    if op.stride_h not in (1, 2) or op.stride_w not in (1, 2):
        return f"stride must be 1 or 2, got {op.stride_h}x{op.stride_w}"
    if op.pad_h not in (1, 2) or op.pad_w not in (1, 2):
        return f"padding must be 1 or 2, got {op.pad_h}x{op.pad_w}"
    return None


def _cba_direct_conv(op: OpAttrs, ctx: PlanContext) -> str | None:
    reason = _pinned(op, ConvAlgo.DIRECT)
    if reason:
        return reason
    if (op.filter_h, op.filter_w) != (1, 1):
        return f"Direct needs a 1x1 filter, got {op.filter_h}x{op.filter_w}"
    if (op.stride_h, op.stride_w) != (1, 1) or (op.pad_h, op.pad_w) != (0, 0):
        return "Direct 1x1 supports neither stride nor padding"
    return None


def winograd_channel_rule(stride: int, filt: int) -> tuple[int, bool] | None:
    """``(multiplier, needs_even)`` for a Winograd fused conv, None if unconstrained."""
    for s, lo, hi, mult, even in WINOGRAD_CHANNEL_RULES:
        if s == stride and lo <= filt <= hi:
            return mult, even
    return None


def _cba_winograd_conv(op: OpAttrs, ctx: PlanContext) -> str | None:
    if ctx.etype is not ElementType.F32:
        return f"Winograd fusion is unavailable for {ctx.etype.value}"
    reason = _pinned(op, ConvAlgo.WINOGRAD)
    if reason:
        return reason
    if op.stride_h != op.stride_w or op.stride_h not in (1, 2):
        return f"Winograd needs stride 1 or 2 on both axes, got {op.stride_h}x{op.stride_w}"
    rule = winograd_channel_rule(op.stride_h, op.filter_h)
    if rule is None:
        return None
    mult, even = rule
    c = op.channels
    scaled = f"{mult} x c" if mult > 1 else "c"
    if mult * c < MIN_WINOGRAD_CHANNELS:
        extra = " and c even" if even else ""
        return (f"Winograd {op.filter_h}x{op.filter_w} stride {op.stride_h} needs "
                f"{scaled} >= {MIN_WINOGRAD_CHANNELS}{extra}, got c={c}")
    if even and c % 2:
        return f"Winograd {op.filter_h}x{op.filter_w} stride {op.stride_h} needs c >= 18 and c even, got c={c}"
    return None


def _winograd_activation(op: OpAttrs, ctx: PlanContext) -> str | None:
    if op.activation not in WINOGRAD_ACTIVATIONS:
        return f"Winograd fusion supports only ReLU and LeakyReLU, got {op.activation.value}"
    return None


def _packed_input(op: OpAttrs, ctx: PlanContext) -> str | None:
    if ctx.etype is not ElementType.F32:
        return f"NA fusion is unavailable for {ctx.etype.value}"
    if not ctx.input_packed:
        return "padding not supported: the input descriptor must be packed"
    return None


def build_graph() -> MetadataGraph:
    g = MetadataGraph()
    g.add_path("CBNA", "CBNA", [_cbna_conv, _any, _any, _any], ConvAlgo.DIRECT)
    g.add_path("CBA-Direct", "CBA", [_cba_direct_conv, _any, _any], ConvAlgo.DIRECT)
    g.add_path("CBA-Winograd", "CBA", [_cba_winograd_conv, _any, _winograd_activation], ConvAlgo.WINOGRAD)
    g.add_path("NA", "NA", [_packed_input, _any])
    return g


METADATA_GRAPH = build_graph()
