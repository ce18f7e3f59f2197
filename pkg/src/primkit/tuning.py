"""Auto-tuning, the text performance database and the two-level plan cache.

Perf-db file format (UTF-8, ``#`` starts a comment line)::

    <problem-key>=<solver>:<p1>,<p2>,...[;<solver>:<p1>,...]*

Records are written sorted by key, entries sorted by solver name.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .conv.api import allocate_workspace, random_operands
from .conv.problem import ConvProblem
from .errors import NotTunable, NoValidConfig, ParseError

log = logging.getLogger(__name__)

PLAN_VERSION = 1
DEFAULT_BUDGET = 256
PRUNE_FACTOR = 2.0
WARMUP_RUNS = 1
TIMED_RUNS = 5


@dataclass(frozen=True)
class PerfConfig:
    solver_name: str
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def serialize(self) -> str:
        return ",".join(str(v) for v in self.values)

    def params(self, names: Iterable[str]) -> dict[str, int]:
        return dict(zip(names, self.values))

    def __str__(self) -> str:
        return f"{self.solver_name}:{self.serialize()}"


@dataclass(frozen=True)
class PerfDbRecord:
    problem_key: str
    entries: Mapping[str, PerfConfig]


class PerfDb:
    """Tuned configurations keyed by problem key, then solver name."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._records: dict[str, dict[str, PerfConfig]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._records = perfdb_load(self.path)._records

    def get(self, problem_key: str, solver_name: str) -> PerfConfig | None:
        with self._lock:
            return self._records.get(problem_key, {}).get(solver_name)

    def put(self, problem_key: str, config: PerfConfig) -> None:
        with self._lock:
            self._records.setdefault(problem_key, {})[config.solver_name] = config

    def records(self) -> list[PerfDbRecord]:
        with self._lock:
            return [PerfDbRecord(k, dict(v)) for k, v in sorted(self._records.items())]

    def save(self, path: str | os.PathLike | None = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("PerfDb has no path to save to")
        perfdb_save(self, target)
        return target

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerfDb):
            return NotImplemented
        return self._records == other._records

    def __repr__(self) -> str:
        return f"PerfDb({len(self)} records, path={self.path})"


def _format_line(key: str, entries: Mapping[str, PerfConfig]) -> str:
    body = ";".join(f"{name}:{entries[name].serialize()}" for name in sorted(entries))
    return f"{key}={body}"


def dumps(db: PerfDb) -> str:
    return "".join(_format_line(r.problem_key, r.entries) + "\n" for r in db.records())


def loads(text: str) -> PerfDb:
    db = PerfDb()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, body = line.partition("=")
        if not sep or not body:
            raise ParseError(lineno, raw)
        try:
            ConvProblem.from_key(key)
        except Exception:
            raise ParseError(lineno, raw, "invalid problem key") from None
        if key in db._records:
            raise ParseError(lineno, raw, "duplicate problem key")
        entries: dict[str, PerfConfig] = {}
        for chunk in body.split(";"):
            name, sep, params = chunk.partition(":")
            if not sep or not name:
                raise ParseError(lineno, raw, "entry needs <solver>:<params>")
            if name in entries:
                raise ParseError(lineno, raw, f"duplicate solver {name!r}")
            values = []
            if params:
                for tok in params.split(","):
                    if not tok.isdigit() or int(tok) < 1:
                        raise ParseError(lineno, raw, f"parameter {tok!r} is not a positive integer")
                    values.append(int(tok))
            entries[name] = PerfConfig(name, tuple(values))
        db._records[key] = entries
    return db


def perfdb_save(db: PerfDb, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), dumps(db).encode("utf-8"))


def perfdb_load(path: str | os.PathLike) -> PerfDb:
    text = Path(path).read_text(encoding="utf-8")
    db = loads(text)
    db.path = Path(path)
    return db


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CacheStats:
    builds: int = 0
    memory_hits: int = 0
    disk_hits: int = 0


def cache_key(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:32]


class PlanCache:
    """In-memory map of built plans backed by an optional on-disk directory.

    A memory hit never touches disk. A disk hit loads the stored payload
    and populates memory. Unreadable or stale disk entries are rebuilt.
    """

    def __init__(self, disk_dir: str | os.PathLike | None = None):
        self.disk_dir = Path(disk_dir) if disk_dir is not None else None
        self.memory: dict[str, object] = {}
        self.stats = CacheStats()
        self._lock = threading.Lock()

    def _entry_path(self, key: str) -> Path:
        return self.disk_dir / f"{key}.npz"

    def get_or_build(
        self,
        key: str,
        descriptor: dict,
        build: Callable[[], object],
        load: Callable[[dict[str, np.ndarray]], object],
    ):
        """Return the plan for ``key``, building it at most once.

        ``build()`` returns a plan exposing ``to_payload() -> dict[str, ndarray]``;
        ``load(payload)`` reconstructs an equivalent plan without rebuilding.
        """
        with self._lock:
            plan = self.memory.get(key)
            if plan is not None:
                self.stats.memory_hits += 1
                return plan
        descriptor = {**descriptor, "version": PLAN_VERSION}
        plan = self._read_disk(key, descriptor, load)
        if plan is None:
            plan = build()
            with self._lock:
                self.stats.builds += 1
            self._write_disk(key, descriptor, plan)
        with self._lock:
            self.memory[key] = plan
        return plan

    def _read_disk(self, key, descriptor, load):
        if self.disk_dir is None:
            return None
        path = self._entry_path(key)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as npz:
                stored = json.loads(str(npz["__descriptor__"]))
                if stored != descriptor:
                    log.info("plan cache entry %s is stale, rebuilding", path)
                    return None
                payload = {name: npz[name] for name in npz.files if name != "__descriptor__"}
            plan = load(payload)
        except Exception as exc:  # corrupted entries degrade to a rebuild
            log.warning("plan cache entry %s unreadable (%s), rebuilding", path, exc)
            return None
        with self._lock:
            self.stats.disk_hits += 1
        return plan

    def _write_disk(self, key, descriptor, plan) -> None:
        if self.disk_dir is None:
            return
        try:
            self.disk_dir.mkdir(parents=True, exist_ok=True)
            arrays = dict(plan.to_payload())
            arrays["__descriptor__"] = np.array(json.dumps(descriptor, sort_keys=True))
            fd, tmp = tempfile.mkstemp(dir=self.disk_dir, suffix=".npz.tmp")
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, **arrays)
            os.replace(tmp, self._entry_path(key))
        except OSError as exc:
            log.warning("could not persist plan %s: %s", key, exc)

    def clear_memory(self) -> None:
        with self._lock:
            self.memory.clear()


def _descriptor(problem, solver, config: PerfConfig | None) -> dict:
    return {
        "problem": problem.key(),
        "solver": solver.name,
        "config": config.serialize() if config is not None else "",
    }


def cached_build(handle, problem, solver, config: PerfConfig | None = None):
    """Build (or fetch) the plan of ``solver`` for ``problem`` through the handle's cache."""
    desc = _descriptor(problem, solver, config)
    key = cache_key(desc["problem"], desc["solver"], desc["config"])
    return handle.cache.get_or_build(
        key,
        desc,
        build=lambda: solver.build_plan(problem, config),
        load=lambda payload: solver.load_plan(problem, config, payload),
    )


def enumerate_tuning_space(solver, problem) -> list[PerfConfig]:
    if not solver.is_tunable:
        raise NotTunable(f"solver {solver.name} has no tuning parameters")
    return list(solver.tuning_space(problem))


def tune(handle, solver, problem, budget: int | None = None, prune: bool = True, operands=None) -> PerfConfig:
    """Time configurations of ``solver`` on ``problem`` and store the best in the perf-db.

    Each configuration gets one warmup run, excluded from its median. With
    ``prune`` a configuration whose first timed run exceeds twice the best
    median so far is abandoned after that run.
    """
    space = enumerate_tuning_space(solver, problem)
    if not space:
        raise NoValidConfig(f"{solver.name} has no valid configuration for {problem.key()}")
    if budget is None:
        budget = min(len(space), DEFAULT_BUDGET)
    if budget < 1:
        raise ValueError("tuning budget must be at least 1")
    a, b = operands if operands is not None else random_operands(problem, handle.rng_seed)
    workspace = allocate_workspace(solver.workspace_size(problem))
    best: PerfConfig | None = None
    best_median = float("inf")
    for config in space[:budget]:
        plan = cached_build(handle, problem, solver, config)
        label = str(config)

        def run(plan=plan):
            return plan.run(a, b, workspace, handle.counters)

        for _ in range(WARMUP_RUNS):
            handle.clock.time(label, run)
        first = handle.clock.time(label, run)
        handle.counters.tuning_evals += 1
        if prune and first > PRUNE_FACTOR * best_median:
            log.debug("pruned %s after first run (%.3f ms)", label, first)
            continue
        times = [first] + [handle.clock.time(label, run) for _ in range(TIMED_RUNS - 1)]
        median = statistics.median(times)
        if median < best_median:
            best, best_median = config, median
    assert best is not None
    handle.perfdb.put(problem.key(), best)
    return best
