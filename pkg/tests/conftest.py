import numpy as np
import pytest

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance_report(request, capsys):
    """Print and record one ``CRITERION k: PASS|FAIL`` line."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(k, ok, detail):
        line = f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
