import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primkit.conv import ConvDirection, ConvMode, ConvProblem
from primkit.conv.api import random_operands
from primkit.errors import NotTunable, ParseError
from primkit.solver import FakeClock, Handle, ImplicitGemmSolver
from primkit.tensor import ElementType
from primkit.tuning import (
    PerfConfig,
    PerfDb,
    PlanCache,
    cache_key,
    cached_build,
    dumps,
    enumerate_tuning_space,
    loads,
    perfdb_load,
    perfdb_save,
    tune,
)

EXAMPLE_KEY = "32-3-224-224-64-7-7-3-3-2-2-1-1-1-F-C-f32"
EXAMPLE_LINE = f"{EXAMPLE_KEY}=ImplicitGemm:8,8,4"


def problem(c=8, k=8, hw=6, f=3, groups=1):
    return ConvProblem(1, c, hw, hw, k, f, f, 1, 1, 1, 1, 1, 1, groups, ConvDirection.FORWARD,
                       ConvMode.CONVOLUTION, ElementType.F32)


class TestPerfDbFormat:
    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "db.txt"
        perfdb_save(PerfDb(), path)
        assert path.read_text() == ""
        assert perfdb_load(path) == PerfDb()

    def test_example_record(self, tmp_path):
        db = loads(EXAMPLE_LINE + "\n")
        assert db.get(EXAMPLE_KEY, "ImplicitGemm") == PerfConfig("ImplicitGemm", (8, 8, 4))
        perfdb_save(db, tmp_path / "db.txt")
        assert (tmp_path / "db.txt").read_text() == EXAMPLE_LINE + "\n"

    def test_comments_and_blank_lines(self):
        db = loads(f"# tuned on a laptop\n\n{EXAMPLE_LINE}\n")
        assert len(db) == 1

    def test_unknown_solver_preserved(self):
        text = f"{EXAMPLE_KEY}=FutureSolver:3,1;ImplicitGemm:8,8,4\n"
        assert dumps(loads(text)) == text

    def test_sorted_on_save(self):
        db = PerfDb()
        keys = ["2-3-8-8-4-3-3-1-1-1-1-1-1-1-F-C-f32", "1-3-8-8-4-3-3-1-1-1-1-1-1-1-F-C-f32"]
        for key in keys:
            db.put(key, PerfConfig("ImplicitGemm", (4, 4, 1)))
        assert [line.split("=")[0] for line in dumps(db).splitlines()] == sorted(keys)

    def test_malformed_first_line(self):
        with pytest.raises(ParseError) as info:
            loads("abc")
        assert info.value.lineno == 1 and info.value.text == "abc"

    @pytest.mark.parametrize("bad", [
        "abc",
        f"{EXAMPLE_KEY}=",
        f"{EXAMPLE_KEY}=ImplicitGemm",
        f"{EXAMPLE_KEY}=ImplicitGemm:8,x,4",
        f"{EXAMPLE_KEY}=ImplicitGemm:8,0,4",
        f"{EXAMPLE_KEY}=ImplicitGemm:8;ImplicitGemm:4",
        "1-2-3=ImplicitGemm:8",
        "1-3-8-8-4-3-3-1-1-1-1-1-1-1-Q-C-f32=Direct:",
    ])
    def test_malformed_line_numbers(self, bad):
        text = f"# header\n{EXAMPLE_LINE}\n\n{bad}\n"
        with pytest.raises(ParseError) as info:
            loads(text)
        assert info.value.lineno == 4
        assert "line 4" in str(info.value)

    def test_duplicate_key(self):
        with pytest.raises(ParseError) as info:
            loads(f"{EXAMPLE_LINE}\n{EXAMPLE_LINE}\n")
        assert info.value.lineno == 2


keys = st.builds(
    lambda n, c, h, k, f, p, s, d, g, di, mo, et: (
        f"{n}-{c * g}-{h}-{h}-{k * g}-{f}-{f}-{p}-{p}-{s}-{s}-{d if mo == 'C' else 1}-{d if mo == 'C' else 1}"
        f"-{g}-{di}-{mo}-{et}"),
    st.integers(1, 64), st.integers(1, 16), st.integers(8, 64), st.integers(1, 16), st.integers(1, 3),
    st.integers(0, 2), st.integers(1, 2), st.integers(1, 2), st.integers(1, 4),
    st.sampled_from(["F", "BD", "BW"]), st.sampled_from(["C", "T"]), st.sampled_from(["f32", "bf16"]),
)
solver_names = st.sampled_from(["ImplicitGemm", "Im2colGemm", "Direct", "Winograd", "FFT", "Vendor_X7"])
databases = st.dictionaries(
    keys,
    st.dictionaries(solver_names, st.lists(st.integers(1, 4096), max_size=5), min_size=1, max_size=4),
    max_size=12,
)


@settings(max_examples=100, deadline=None)
@given(databases)
def test_save_load_identity(tmp_path_factory, records):
    db = PerfDb()
    for key, entries in records.items():
        for name, values in entries.items():
            db.put(key, PerfConfig(name, tuple(values)))
    path = tmp_path_factory.mktemp("db") / "perf.txt"
    perfdb_save(db, path)
    again = perfdb_load(path)
    assert again == db
    assert dumps(again) == dumps(db)


class TestPlanCache:
    def test_second_build_is_memory_hit(self, tmp_path):
        h = Handle(tmp_path)
        solver = h.solver("Im2colGemm")
        a = cached_build(h, problem(), solver)
        b = cached_build(h, problem(), solver)
        assert a is b
        assert h.cache.stats.builds == 1 and h.cache.stats.memory_hits == 1

    def test_fresh_handle_reads_disk(self, tmp_path):
        cached_build(Handle(tmp_path), problem(), ImplicitGemmSolver())
        h = Handle(tmp_path)
        cached_build(h, problem(), ImplicitGemmSolver())
        assert (h.cache.stats.builds, h.cache.stats.disk_hits) == (0, 1)

    def test_cached_and_fresh_plans_bit_identical(self, tmp_path):
        p = problem()
        a, b = random_operands(p, 3)
        fresh = cached_build(Handle(tmp_path), p, Handle(tmp_path).solver("Im2colGemm")).run(a, b)
        h = Handle(tmp_path)
        loaded = cached_build(h, p, h.solver("Im2colGemm"))
        assert h.cache.stats.disk_hits == 1
        np.testing.assert_array_equal(loaded.run(a, b), fresh)

    @pytest.mark.parametrize("garbage", [b"", b"not a zip archive", b"PK\x03\x04truncated"])
    def test_corrupted_entry_rebuilds(self, tmp_path, garbage):
        cached_build(Handle(tmp_path), problem(), ImplicitGemmSolver())
        for entry in tmp_path.glob("*.npz"):
            entry.write_bytes(garbage)
        h = Handle(tmp_path)
        cached_build(h, problem(), ImplicitGemmSolver())
        assert (h.cache.stats.builds, h.cache.stats.disk_hits) == (1, 0)

    def test_stale_version_rebuilds(self, tmp_path):
        cache = PlanCache(tmp_path)

        class Plan:
            def to_payload(self):
                return {"x": np.arange(3)}

        cache.get_or_build("k", {"v": 1}, Plan, lambda payload: Plan())
        fresh = PlanCache(tmp_path)
        fresh.get_or_build("k", {"v": 2}, Plan, lambda payload: Plan())
        assert fresh.stats.builds == 1 and fresh.stats.disk_hits == 0

    def test_memory_only_cache(self):
        cache = PlanCache(None)
        cache.get_or_build("k", {}, lambda: object(), lambda p: None)
        cache.get_or_build("k", {}, lambda: object(), lambda p: None)
        assert cache.stats.builds == 1 and cache.stats.memory_hits == 1

    def test_cache_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PRIMKIT_CACHE_DIR", str(tmp_path / "envcache"))
        h = Handle()
        cached_build(h, problem(), h.solver("Im2colGemm"))
        assert list((tmp_path / "envcache").glob("*.npz"))

    def test_key_is_stable(self):
        assert cache_key("a", "b") == cache_key("a", "b") != cache_key("a", "c")
        assert len(cache_key("x")) == 32


class TestTune:
    def test_not_tunable(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock())
        with pytest.raises(NotTunable):
            tune(h, h.solver("Direct"), problem())
        with pytest.raises(NotTunable):
            enumerate_tuning_space(h.solver("Winograd"), problem())

    def test_budget_one(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock())
        solver = h.solver("ImplicitGemm")
        first = enumerate_tuning_space(solver, problem())[0]
        assert tune(h, solver, problem(), budget=1) == first
        assert h.counters.tuning_evals == 1

    def test_rejects_zero_budget(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock())
        with pytest.raises(ValueError):
            tune(h, h.solver("ImplicitGemm"), problem(), budget=0)

    def test_argmin_under_fake_clock(self, tmp_path):
        h = Handle(tmp_path)
        solver = h.solver("ImplicitGemm")
        space = enumerate_tuning_space(solver, problem())
        target = space[len(space) // 2]
        times = {str(cfg): 10.0 + i for i, cfg in enumerate(space)}
        times[str(target)] = 1.0
        h.clock = FakeClock(times)
        assert tune(h, solver, problem()) == target
        assert h.perfdb.get(problem().key(), "ImplicitGemm") == target

    def test_pruned_matches_exhaustive(self, tmp_path, rng):
        solver = ImplicitGemmSolver()
        space = enumerate_tuning_space(solver, problem())
        times = {str(cfg): float(t) for cfg, t in zip(space, rng.uniform(1, 50, len(space)))}
        pruned = Handle(tmp_path, clock=FakeClock(times))
        full = Handle(tmp_path, clock=FakeClock(times))
        best_p = tune(pruned, solver, problem(), prune=True)
        best_f = tune(full, solver, problem(), prune=False)
        assert times[str(best_p)] == times[str(best_f)] == min(times.values())
        assert len(pruned.clock.calls) < len(full.clock.calls)

    def test_stored_config_used_without_retuning(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock())
        solver = h.solver("ImplicitGemm")
        best = tune(h, solver, problem(), budget=3)
        evals = h.counters.tuning_evals
        assert h.get_plan(problem(), solver).config == best
        assert h.counters.tuning_evals == evals

    def test_default_budget_caps_at_256(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock())
        p = problem(c=16, k=16)
        solver = h.solver("ImplicitGemm")
        tune(h, solver, p, prune=False)
        assert h.counters.tuning_evals == min(256, len(enumerate_tuning_space(solver, p)))

    def test_tuned_db_persists(self, tmp_path):
        h = Handle(tmp_path, clock=FakeClock(), perfdb=tmp_path / "perf.txt")
        best = tune(h, h.solver("ImplicitGemm"), problem(), budget=2)
        h.perfdb.save()
        assert perfdb_load(tmp_path / "perf.txt").get(problem().key(), "ImplicitGemm") == best
