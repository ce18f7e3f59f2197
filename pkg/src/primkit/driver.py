"""Command-line benchmark and tuning driver.

Subcommands ``conv``, ``tune``, ``fusion``, ``bnorm`` and ``rnn`` each write
one report (CSV by default, JSON with ``--json``) and print its path.
Problem flags follow the usual driver convention::

    primkit conv -n 1 -c 8 -H 16 -W 16 -k 8 -y 3 -x 3 -p 1 -q 1 -u 1 -v 1

Exit status is 0 on success, 2 for unusable flags and 1 when the library
rejects the request (no applicable solver, nothing tunable, unsupported
fusion).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from .conv.problem import ConvAlgo, ConvDescriptor, ConvDirection, ConvMode, ConvProblem
from .errors import FusionNotSupported, NoApplicableSolver, NotTunable, PrimkitError
from .fusion import (
    ActivationArgs,
    ActivationOp,
    BatchNormArgs,
    BatchNormInferenceOp,
    BiasArgs,
    BiasOp,
    ConvArgs,
    ConvForwardOp,
    FusionPlan,
)
from .primitives import ActivationMode, BatchNormMode, BatchNormParams
from .primitives.batchnorm import batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train
from .rnn import RnnCell, RnnDescriptor, RnnDirection, SeqBatchLayout, init_weights, rnn_backward_data, rnn_backward_weights, rnn_forward
from .solver import FakeClock, Handle, WallClock, find_convolution
from .tensor import ElementType, OpCounters, TensorDescriptor, round_bf16
from .tuning import PerfDb, perfdb_load, perfdb_save, tune

REPORT_SCHEMA = "primkit-report"
REPORT_VERSION = 1
BASELINE_SOLVER = "Im2colGemm"

_DIRECTIONS = {"1": ConvDirection.FORWARD, "2": ConvDirection.BACKWARD_DATA, "4": ConvDirection.BACKWARD_WEIGHTS,
               "F": ConvDirection.FORWARD, "BD": ConvDirection.BACKWARD_DATA, "BW": ConvDirection.BACKWARD_WEIGHTS}


class UsageError(Exception):
    """Flags parsed but do not describe a valid problem."""


def _fake_clock(spec: str | None):
    """``--fake-clock`` with no value gives every run 1 ms; ``Name=ms,...`` scripts durations."""
    if spec is None:
        return None
    durations: dict[str, float] = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        name, sep, value = part.partition("=")
        if not sep:
            raise UsageError(f"--fake-clock entries look like Name=ms, got {part!r}")
        try:
            durations[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--fake-clock duration {value!r} is not a number") from None
    return FakeClock(durations)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--output", help="report path (default: primkit-<op>-<label>.csv in the working directory)")
    p.add_argument("--json", action="store_true", help="write a JSON report instead of CSV")
    p.add_argument("--fake-clock", nargs="?", const="", default=None, metavar="NAME=MS,...",
                   help="deterministic timings instead of wall clock")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", help="plan cache directory (default: $PRIMKIT_CACHE_DIR or ~/.cache/primkit)")


def _add_conv_shape(p: argparse.ArgumentParser, *, conv_required: bool = True) -> None:
    p.add_argument("-n", "--batchsize", type=int, default=1)
    p.add_argument("-c", "--in-channels", type=int, required=True)
    p.add_argument("-H", "--in-h", type=int, required=True)
    p.add_argument("-W", "--in-w", type=int, required=True)
    p.add_argument("-k", "--out-channels", type=int, required=conv_required)
    p.add_argument("-y", "--fil-h", type=int, required=conv_required)
    p.add_argument("-x", "--fil-w", type=int, required=conv_required)
    p.add_argument("-p", "--pad-h", type=int, default=0)
    p.add_argument("-q", "--pad-w", type=int, default=0)
    p.add_argument("-u", "--conv-stride-h", type=int, default=1)
    p.add_argument("-v", "--conv-stride-w", type=int, default=1)
    p.add_argument("-l", "--dilation-h", type=int, default=1)
    p.add_argument("-j", "--dilation-w", type=int, default=1)
    p.add_argument("-g", "--group-count", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="primkit", description="Benchmark and tune primkit primitives.")
    sub = parser.add_subparsers(dest="command", required=True)

    conv = sub.add_parser("conv", help="run Find on a convolution and report every applicable solver")
    _add_conv_shape(conv)
    conv.add_argument("-F", "--direction", default="1", choices=sorted(_DIRECTIONS),
                      help="1/F forward, 2/BD backward data, 4/BW backward weights")
    conv.add_argument("-m", "--mode", default="conv", choices=["conv", "trans"])
    conv.add_argument("--dtype", default="f32", choices=["f32", "bf16"])
    _add_common(conv)

    tun = sub.add_parser("tune", help="tune every tunable solver for a convolution and update the perf-db")
    _add_conv_shape(tun)
    tun.add_argument("-F", "--direction", default="1", choices=sorted(_DIRECTIONS))
    tun.add_argument("-m", "--mode", default="conv", choices=["conv", "trans"])
    tun.add_argument("--dtype", default="f32", choices=["f32", "bf16"])
    tun.add_argument("--db", required=True, help="perf-db file to read and update")
    tun.add_argument("--budget", type=int, default=None, help="maximum configurations per solver")
    tun.add_argument("--fake-clock", nargs="?", const="", default=None, metavar="NAME=MS,...")
    tun.add_argument("--seed", type=int, default=0)
    tun.add_argument("--cache-dir")

    fus = sub.add_parser("fusion", help="compare a fused plan against the unfused pipeline")
    fus.add_argument("--combo", required=True, choices=["CBA", "CBNA", "NA"])
    _add_conv_shape(fus, conv_required=False)
    fus.add_argument("--algo", choices=["Direct", "Winograd"], help="pin the fused conv algorithm")
    fus.add_argument("--activation", default="relu", choices=[m.value for m in ActivationMode])
    fus.add_argument("--alpha", type=float, default=0.01, help="LeakyReLU slope")
    fus.add_argument("--bn-mode", default="spatial", choices=[m.value for m in BatchNormMode])
    fus.add_argument("--row-pad", type=int, default=0, help="extra elements per input row (non-packed input)")
    fus.add_argument("--dtype", default="f32", choices=["f32", "bf16"])
    fus.add_argument("-i", "--iterations", type=int, default=5)
    _add_common(fus)

    bn = sub.add_parser("bnorm", help="time batch norm forward (train, infer) and backward")
    bn.add_argument("-n", "--batchsize", type=int, default=1)
    bn.add_argument("-c", "--in-channels", type=int, required=True)
    bn.add_argument("-H", "--in-h", type=int, required=True)
    bn.add_argument("-W", "--in-w", type=int, required=True)
    bn.add_argument("--bn-mode", default="spatial", choices=[m.value for m in BatchNormMode])
    bn.add_argument("-i", "--iterations", type=int, default=5)
    _add_common(bn)

    rnn = sub.add_parser("rnn", help="time an RNN forward and backward pass and count GEMM calls")
    rnn.add_argument("--cell", default="lstm", choices=[c.value for c in RnnCell])
    rnn.add_argument("-T", "--seq-len", type=int, required=True)
    rnn.add_argument("-n", "--batchsize", type=int, default=1)
    rnn.add_argument("-D", "--in-size", type=int, required=True)
    rnn.add_argument("-H", "--hidden", type=int, required=True)
    rnn.add_argument("--layers", type=int, default=1)
    rnn.add_argument("--bidirectional", action="store_true")
    rnn.add_argument("--batch-sizes", help="comma-separated non-increasing live rows per step")
    rnn.add_argument("-i", "--iterations", type=int, default=5)
    _add_common(rnn)
    return parser


def problem_from_args(args) -> ConvProblem:
    try:
        direction = _DIRECTIONS[args.direction]
        mode = ConvMode.TRANSPOSE if args.mode == "trans" else ConvMode.CONVOLUTION
        return ConvProblem(
            args.batchsize, args.in_channels, args.in_h, args.in_w, args.out_channels, args.fil_h, args.fil_w,
            args.pad_h, args.pad_w, args.conv_stride_h, args.conv_stride_w, args.dilation_h, args.dilation_w,
            args.group_count, direction, mode, ElementType.parse(args.dtype),
        )
    except PrimkitError as exc:
        raise UsageError(str(exc)) from None


def _handle(args, perfdb: PerfDb | None = None) -> Handle:
    return Handle(args.cache_dir, perfdb=perfdb, rng_seed=args.seed, clock=_fake_clock(args.fake_clock) or WallClock())


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_report(path: Path, op: str, columns: list[str], rows: list[dict], as_json: bool, meta: dict | None = None) -> Path:
    meta = dict(meta or {})
    if as_json:
        doc = {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "op": op, **meta, "columns": columns, "rows": rows}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        extras = "".join(f" {k}={v}" for k, v in sorted(meta.items()))
        buf.write(f"# {REPORT_SCHEMA} v{REPORT_VERSION} op={op}{extras}\n")
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _report_path(args, op: str, label: str) -> Path:
    if args.output:
        return Path(args.output)
    return Path.cwd() / f"primkit-{op}-{label}.{'json' if args.json else 'csv'}"


def cmd_conv(args) -> Path:
    problem = problem_from_args(args)
    handle = _handle(args)
    perfs = find_convolution(handle, problem)
    base = next((p.time_ms for p in perfs if p.solver_name == BASELINE_SOLVER), None)
    rows = []
    for p in perfs:
        speedup = "" if base is None or p.time_ms <= 0 else _fmt(base / p.time_ms)
        rows.append({"label": problem.label(), "solver": p.solver_name, "median_ms": _fmt(p.time_ms),
                     "workspace_bytes": p.workspace_bytes, "speedup_vs_baseline": speedup})
    columns = ["label", "solver", "median_ms", "workspace_bytes", "speedup_vs_baseline"]
    meta = {"problem": problem.key(), "baseline": BASELINE_SOLVER}
    return write_report(_report_path(args, "conv", problem.label()), "conv", columns, rows, args.json, meta)


def cmd_tune(args) -> Path:
    problem = problem_from_args(args)
    db_path = Path(args.db)
    db = perfdb_load(db_path) if db_path.exists() else PerfDb(db_path)
    handle = _handle(args, db)
    tunable = [s for s in handle.solvers if s.is_tunable and s.is_applicable(problem)]
    if not tunable:
        raise NotTunable(f"no tunable solver applies to {problem.key()}; perf-db left untouched")
    for solver in tunable:
        tune(handle, solver, problem, budget=args.budget)
    perfdb_save(handle.perfdb, db_path)
    return db_path


def _timed(clock, label: str, fn, iterations: int) -> float:
    clock.time(label, fn)  # warmup
    return statistics.median(clock.time(label, fn) for _ in range(max(1, iterations)))


def build_fusion_plan(args) -> tuple[FusionPlan, list, np.ndarray]:
    """Plan, random arguments and input for the ``fusion`` subcommand."""
    rng = np.random.default_rng(args.seed)
    etype = ElementType.parse(args.dtype)
    n, c, h, w = args.batchsize, args.in_channels, args.in_h, args.in_w
    strides = ()
    if args.row_pad:
        row = w + args.row_pad
        strides = (c * h * row, h * row, row, 1)
    plan = FusionPlan(TensorDescriptor((n, c, h, w), strides, etype), etype)
    binds = []
    bn_mode = BatchNormMode(args.bn_mode)
    if "C" in args.combo:
        if None in (args.out_channels, args.fil_h, args.fil_w):
            raise UsageError(f"{args.combo} needs -k, -y and -x")
        conv = ConvDescriptor(args.pad_h, args.pad_w, args.conv_stride_h, args.conv_stride_w,
                              args.dilation_h, args.dilation_w, ConvMode.CONVOLUTION, args.group_count)
        fdims = (args.out_channels, c // args.group_count, args.fil_h, args.fil_w)
        plan.add_op(ConvForwardOp(conv, TensorDescriptor(fdims, etype=etype), ConvAlgo(args.algo) if args.algo else None))
        binds.append(ConvArgs(rng.standard_normal(fdims).astype(np.float32)))
    if "B" in args.combo:
        plan.add_op(BiasOp())
        binds.append(BiasArgs(rng.standard_normal(plan.output_dims[1]).astype(np.float32)))
    if "N" in args.combo:
        plan.add_op(BatchNormInferenceOp(bn_mode))
        shape = bn_mode.param_shape(plan.output_dims)
        gamma, beta, mean = (rng.standard_normal(shape).astype(np.float32) for _ in range(3))
        var = rng.uniform(0.5, 2.0, shape).astype(np.float32)
        binds.append(BatchNormArgs(gamma, beta, mean, var))
    plan.add_op(ActivationOp(ActivationMode(args.activation)))
    binds.append(ActivationArgs(args.alpha))
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    if etype is ElementType.BF16:
        x = round_bf16(x)
        binds = [ConvArgs(round_bf16(b.filter)) if isinstance(b, ConvArgs) else b for b in binds]
    return plan, binds, x


def cmd_fusion(args) -> Path:
    plan, binds, x = build_fusion_plan(args)
    handle = _handle(args)
    plan.compile(handle)
    plan.set_args(binds)
    label = "-".join(str(v) for v in (args.combo, args.batchsize, args.in_channels, args.in_h, args.in_w,
                                      args.out_channels or 0, args.fil_h or 0, args.fil_w or 0, args.pad_h, args.pad_w))
    counters = handle.counters
    before = counters.buffer_roundtrips
    fused = plan.execute(handle, x)
    fused_trips = counters.buffer_roundtrips - before
    before = counters.buffer_roundtrips
    unfused = plan.run_unfused(handle, x)
    unfused_trips = counters.buffer_roundtrips - before
    tol = 2e-2 if plan.etype is ElementType.BF16 else 1e-5
    ref = np.asarray(unfused, dtype=np.float64)
    err = float(np.abs(np.asarray(fused, dtype=np.float64) - ref).max() / max(np.abs(ref).max(), 1e-30))
    if err > tol:
        raise PrimkitError(f"fused output differs from the unfused pipeline (rel err {err:.3e} > {tol:g})")
    t_fused = _timed(handle.clock, "fused", lambda: plan.execute(handle, x), args.iterations)
    t_unfused = _timed(handle.clock, "unfused", lambda: plan.run_unfused(handle, x), args.iterations)
    rows = []
    for name, t, trips in (("unfused", t_unfused, unfused_trips), ("fused", t_fused, fused_trips)):
        rows.append({"label": label, "pipeline": name, "median_ms": _fmt(t), "buffer_roundtrips": trips,
                     "speedup_vs_baseline": _fmt(t_unfused / t) if t > 0 else ""})
    columns = ["label", "pipeline", "median_ms", "buffer_roundtrips", "speedup_vs_baseline"]
    meta = {"kernel": plan.verdict.kernel, "rel_err": f"{err:.3e}", "baseline": "unfused"}
    return write_report(_report_path(args, "fusion", label), "fusion", columns, rows, args.json, meta)


def cmd_bnorm(args) -> Path:
    rng = np.random.default_rng(args.seed)
    mode = BatchNormMode(args.bn_mode)
    shape = (args.batchsize, args.in_channels, args.in_h, args.in_w)
    x = rng.standard_normal(shape).astype(np.float32)
    dy = rng.standard_normal(shape).astype(np.float32)
    p = BatchNormParams.identity(mode, shape)
    clock = _fake_clock(args.fake_clock) or WallClock()
    _, mean, invstd = batchnorm_forward_train(mode, x, p)
    passes = {
        "forward_train": lambda: batchnorm_forward_train(mode, x, BatchNormParams.identity(mode, shape)),
        "forward_infer": lambda: batchnorm_forward_infer(mode, x, p),
        "backward": lambda: batchnorm_backward(mode, x, dy, p, mean, invstd),
    }
    label = "-".join(map(str, shape))
    rows = [{"label": label, "pass": name, "median_ms": _fmt(_timed(clock, name, fn, args.iterations))}
            for name, fn in passes.items()]
    return write_report(_report_path(args, "bnorm", label), "bnorm", ["label", "pass", "median_ms"], rows, args.json,
                        {"mode": mode.value})


def cmd_rnn(args) -> Path:
    rng = np.random.default_rng(args.seed)
    desc = RnnDescriptor(RnnCell(args.cell), args.hidden, args.layers,
                         RnnDirection.BIDIRECTIONAL if args.bidirectional else RnnDirection.UNIDIRECTIONAL)
    if args.batch_sizes:
        try:
            sizes = tuple(int(v) for v in args.batch_sizes.split(","))
        except ValueError:
            raise UsageError(f"--batch-sizes must be integers, got {args.batch_sizes!r}") from None
        layout = SeqBatchLayout(sizes)
        if layout.steps != args.seq_len or sizes[0] > args.batchsize:
            raise UsageError("--batch-sizes must have -T entries, none above -n")
    else:
        layout = SeqBatchLayout.constant(args.seq_len, args.batchsize)
    weights = init_weights(desc, args.in_size, rng, dtype=np.float32)
    x = rng.standard_normal((args.seq_len, args.batchsize, args.in_size)).astype(np.float32)
    dy = rng.standard_normal((args.seq_len, args.batchsize, args.hidden * desc.dirs)).astype(np.float32)
    clock = _fake_clock(args.fake_clock) or WallClock()
    out = rnn_forward(desc, weights, x, layout)
    _, _, _, deltas = rnn_backward_data(desc, weights, out.saved, dy)
    passes = {
        "forward": lambda c: rnn_forward(desc, weights, x, layout, counters=c),
        "backward_data": lambda c: rnn_backward_data(desc, weights, out.saved, dy, counters=c),
        "backward_weights": lambda c: rnn_backward_weights(desc, out.saved, deltas, counters=c),
    }
    label = f"{args.cell}-{args.seq_len}-{args.batchsize}-{args.in_size}-{args.hidden}"
    rows = []
    for name, fn in passes.items():
        counted = OpCounters()
        fn(counted)
        t = _timed(clock, name, lambda fn=fn: fn(None), args.iterations)
        rows.append({"label": label, "pass": name, "median_ms": _fmt(t), "gemm_calls": counted.gemm_calls})
    return write_report(_report_path(args, "rnn", label), "rnn", ["label", "pass", "median_ms", "gemm_calls"], rows,
                        args.json, {"batch_sizes": ",".join(map(str, layout.batch_sizes))})


COMMANDS = {"conv": cmd_conv, "tune": cmd_tune, "fusion": cmd_fusion, "bnorm": cmd_bnorm, "rnn": cmd_rnn}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        path = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"primkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NoApplicableSolver, NotTunable, FusionNotSupported, PrimkitError) as exc:
        print(f"primkit {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"primkit {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:  # e.g. a malformed environment setting
        print(f"primkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(os.fspath(path))
    return 0


if __name__ == "__main__":
    sys.exit(main())
