import numpy as np
import pytest


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Every test gets its own plan-cache directory and default Find policy."""
    cache = tmp_path / "plan-cache"
    monkeypatch.setenv("PRIMKIT_CACHE_DIR", str(cache))
    monkeypatch.delenv("PRIMKIT_FIND_ENFORCE", raising=False)
    return cache


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
