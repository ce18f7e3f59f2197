"""Solvers, the library handle and the Find protocol.

A solver is a stateless strategy for one convolution algorithm: it decides
applicability, reports workspace, enumerates tuning configurations and
builds executable plans. Find benchmarks every applicable solver.
"""
from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .conv import implicit_gemm
from .conv.api import (
    allocate_workspace,
    applicability,
    execute,
    operand_shapes,
    random_operands,
    workspace_size,
)
from .conv.im2col import tap_indices
from .conv.problem import ConvAlgo, ConvDirection, ConvProblem
from .errors import AlgoNotApplicable, DuplicateSolver, NoApplicableSolver, NotTunable, ShapeMismatch
from .tensor import OpCounters, as_array
from .tuning import PerfConfig, PerfDb, PlanCache, cached_build, tune

CACHE_DIR_ENV = "PRIMKIT_CACHE_DIR"
FIND_ENFORCE_ENV = "PRIMKIT_FIND_ENFORCE"
WARMUP_RUNS = 1
TIMED_RUNS = 5


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "primkit"


class WallClock:
    """Times one execution with ``time.perf_counter``; returns milliseconds."""

    def time(self, label: str, fn: Callable[[], object]) -> float:
        start = time.perf_counter()
        fn()
        return (time.perf_counter() - start) * 1e3


class FakeClock:
    """Deterministic clock for tests: runs ``fn`` and reports a scripted duration.

    ``durations`` maps a run label (solver name, or ``solver:config``) to
    milliseconds, or is a callable taking the label. Every call is recorded.
    """

    def __init__(self, durations: Mapping[str, float] | Callable[[str], float] | None = None, default: float = 1.0):
        self.durations = durations if durations is not None else {}
        self.default = default
        self.calls: list[str] = []

    def time(self, label: str, fn: Callable[[], object]) -> float:
        fn()
        self.calls.append(label)
        if callable(self.durations):
            return float(self.durations(label))
        if label in self.durations:
            return float(self.durations[label])
        # a bare solver name also covers all of that solver's configs
        return float(self.durations.get(label.split(":", 1)[0], self.default))


@dataclass(frozen=True)
class ConvAlgoPerf:
    algo: ConvAlgo
    solver_name: str
    time_ms: float
    workspace_bytes: int


class ConvPlan:
    """An executable convolution: problem, solver and configuration fixed."""

    def __init__(self, problem: ConvProblem, solver_name: str, algo: ConvAlgo,
                 config: PerfConfig | None, payload: dict[str, np.ndarray] | None = None):
        self.problem = problem
        self.solver_name = solver_name
        self.algo = algo
        self.config = config
        self.payload = payload or {}

    def run(self, a, b, workspace=None, counters: OpCounters | None = None) -> np.ndarray:
        tile = None
        if self.algo is ConvAlgo.IMPLICIT_GEMM and self.config is not None:
            tile = implicit_gemm.TileConfig(*self.config.values)
        return execute(self.algo, self.problem, as_array(a), as_array(b), workspace, counters,
                       config=tile, taps=self.payload.get("taps"))

    def to_payload(self) -> dict[str, np.ndarray]:
        return dict(self.payload)

    def __repr__(self):
        cfg = f" {self.config.serialize()}" if self.config is not None else ""
        return f"ConvPlan({self.problem.key()} {self.solver_name}{cfg})"


class Solver:
    """Base solver. Subclasses set ``name``, ``algo`` and may be tunable.

    Solvers carry no instance state; two instances of one class are
    interchangeable.
    """

    __slots__ = ()
    name: str = ""
    algo: ConvAlgo
    is_tunable: bool = False
    param_names: tuple[str, ...] = ()

    def is_applicable(self, problem: ConvProblem) -> bool:
        return applicability(self.algo, problem) is None

    def workspace_size(self, problem: ConvProblem) -> int:
        return workspace_size(self.algo, problem)

    def tuning_space(self, problem: ConvProblem) -> list[PerfConfig]:
        raise NotTunable(f"solver {self.name} has no tuning parameters")

    def default_config(self, problem: ConvProblem) -> PerfConfig | None:
        return None

    def build_plan(self, problem: ConvProblem, config: PerfConfig | None = None) -> ConvPlan:
        if not self.is_applicable(problem):
            raise AlgoNotApplicable(applicability(self.algo, problem))
        return ConvPlan(problem, self.name, self.algo, config, self._compile(problem, config))

    def load_plan(self, problem: ConvProblem, config: PerfConfig | None, payload: dict[str, np.ndarray]) -> ConvPlan:
        return ConvPlan(problem, self.name, self.algo, config, payload)

    def _compile(self, problem: ConvProblem, config: PerfConfig | None) -> dict[str, np.ndarray]:
        return {}

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))

    def __repr__(self):
        return f"{type(self).__name__}()"


class Im2colGemmSolver(Solver):
    __slots__ = ()
    name = "Im2colGemm"
    algo = ConvAlgo.IM2COL_GEMM

    def _compile(self, problem, config):
        if problem.is_transpose or problem.direction is not ConvDirection.FORWARD:
            return {}
        wp = problem.w + 2 * problem.pad_w
        return {"taps": tap_indices(wp, problem.y, problem.x, problem.out_h, problem.out_w, problem.conv_desc)}


class DirectSolver(Solver):
    __slots__ = ()
    name = "Direct"
    algo = ConvAlgo.DIRECT


class WinogradSolver(Solver):
    __slots__ = ()
    name = "Winograd"
    algo = ConvAlgo.WINOGRAD


class FftSolver(Solver):
    __slots__ = ()
    name = "FFT"
    algo = ConvAlgo.FFT


class ImplicitGemmSolver(Solver):
    __slots__ = ()
    name = "ImplicitGemm"
    algo = ConvAlgo.IMPLICIT_GEMM
    is_tunable = True
    param_names = implicit_gemm.PARAM_NAMES

    @staticmethod
    def _gemm_dims(problem: ConvProblem) -> tuple[int, int]:
        return problem.k // problem.groups, problem.c // problem.groups

    def tuning_space(self, problem):
        kg, cg = self._gemm_dims(problem)
        return [PerfConfig(self.name, (t.tile_m, t.tile_n, t.tile_k)) for t in implicit_gemm.tuning_space(kg, cg)]

    def default_config(self, problem):
        t = implicit_gemm.default_config(*self._gemm_dims(problem))
        return PerfConfig(self.name, (t.tile_m, t.tile_n, t.tile_k))

    def build_plan(self, problem, config=None):
        config = config or self.default_config(problem)
        if not implicit_gemm.TileConfig(*config.values).is_valid(*self._gemm_dims(problem)):
            raise ValueError(f"invalid {self.name} config {config.serialize()} for {problem.key()}")
        return super().build_plan(problem, config)

    def load_plan(self, problem, config, payload):
        return super().load_plan(problem, config or self.default_config(problem), payload)


BUILTIN_SOLVERS: tuple[type[Solver], ...] = (
    Im2colGemmSolver,
    DirectSolver,
    WinogradSolver,
    FftSolver,
    ImplicitGemmSolver,
)


class Handle:
    """Library context: counters, plan cache, perf-db, seed and clock.

    Each handle is single-threaded; use one handle per thread.
    """

    def __init__(
        self,
        cache_dir: str | os.PathLike | None = None,
        *,
        cache: PlanCache | None = None,
        perfdb: PerfDb | str | os.PathLike | None = None,
        rng_seed: int = 0,
        clock: WallClock | FakeClock | None = None,
    ):
        self.counters = OpCounters()
        if cache is None:
            cache = PlanCache(cache_dir if cache_dir is not None else default_cache_dir())
        self.cache = cache
        if perfdb is None:
            perfdb = PerfDb()
        elif not isinstance(perfdb, PerfDb):
            perfdb = PerfDb(perfdb)
        self.perfdb = perfdb
        self.rng_seed = rng_seed
        self.clock = clock or WallClock()
        self._solvers: dict[str, Solver] = {}
        self._find_memo: dict[tuple[str, int], list[ConvAlgoPerf]] = {}
        for cls in BUILTIN_SOLVERS:
            self.register_solver(cls())

    @property
    def solvers(self) -> list[Solver]:
        return list(self._solvers.values())

    def solver(self, name: str) -> Solver:
        return self._solvers[name]

    def register_solver(self, solver: Solver) -> None:
        if solver.name in self._solvers:
            raise DuplicateSolver(f"solver {solver.name!r} is already registered")
        self._solvers[solver.name] = solver
        self._find_memo.clear()

    def config_for(self, problem: ConvProblem, solver: Solver) -> PerfConfig | None:
        stored = self.perfdb.get(problem.key(), solver.name)
        return stored if stored is not None else solver.default_config(problem)

    def get_plan(self, problem: ConvProblem, solver: Solver | str) -> ConvPlan:
        if isinstance(solver, str):
            solver = self._solvers[solver]
        return cached_build(self, problem, solver, self.config_for(problem, solver))


def register_solver(handle: Handle, solver: Solver) -> None:
    handle.register_solver(solver)


def is_applicable(solver: Solver, problem: ConvProblem) -> bool:
    return solver.is_applicable(problem)


def get_workspace_size(solver: Solver, problem: ConvProblem) -> int:
    if not solver.is_applicable(problem):
        raise AlgoNotApplicable(f"{solver.name} is not applicable to {problem.key()}")
    return solver.workspace_size(problem)


def _find_enforce() -> str:
    value = os.environ.get(FIND_ENFORCE_ENV, "NONE").strip().upper()
    if value not in ("NONE", "SEARCH"):
        raise ValueError(f"{FIND_ENFORCE_ENV} must be NONE or SEARCH, got {value!r}")
    return value


def find_convolution(
    handle: Handle,
    problem: ConvProblem,
    inputs: Iterable | None = None,
    workspace=None,
) -> list[ConvAlgoPerf]:
    """Benchmark every applicable solver and rank them by median time.

    ``inputs`` are the two operands for the problem's direction (see
    :func:`primkit.conv.execute`); random ones are drawn from the handle's
    seed when omitted. ``workspace`` is a buffer or a byte count; solvers
    requesting more are skipped. ``None`` sizes it for every solver.
    Results are memoized per handle.
    """
    applicable = [s for s in handle.solvers if s.is_applicable(problem)]
    requests = {s.name: s.workspace_size(problem) for s in applicable}
    if workspace is None:
        workspace = allocate_workspace(max(requests.values(), default=0))
    elif isinstance(workspace, (int, np.integer)):
        workspace = allocate_workspace(int(workspace))
    available = memoryview(workspace).nbytes
    memo_key = (problem.key(), available)
    if memo_key in handle._find_memo:
        return list(handle._find_memo[memo_key])

    if inputs is None:
        a, b = random_operands(problem, handle.rng_seed)
    else:
        a, b = (as_array(t) for t in inputs)
        expected = operand_shapes(problem)
        if (a.shape, b.shape) != expected:
            raise ShapeMismatch(f"operands {a.shape}, {b.shape} do not match problem shapes {expected}")
    search = _find_enforce() == "SEARCH"

    results = []
    for solver in applicable:
        if requests[solver.name] > available:
            continue
        if search and solver.is_tunable and handle.perfdb.get(problem.key(), solver.name) is None:
            tune(handle, solver, problem, operands=(a, b))
        plan = handle.get_plan(problem, solver)

        def run(plan=plan):
            return plan.run(a, b, workspace, handle.counters)

        for _ in range(WARMUP_RUNS):
            handle.clock.time(solver.name, run)
        times = [handle.clock.time(solver.name, run) for _ in range(TIMED_RUNS)]
        results.append(ConvAlgoPerf(solver.algo, solver.name, statistics.median(times), requests[solver.name]))
    if not results:
        raise NoApplicableSolver(f"no solver can run {problem.key()} within {available} bytes of workspace")
    results.sort(key=lambda r: (r.time_ms, r.solver_name))
    handle._find_memo[memo_key] = results
    return list(results)
