import os
from pathlib import Path

import pytest

from mlpk.data import synth_dataset

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def report_criterion(request):
    """Record a ``criterion N PASS|FAIL: ...`` line, echo it and return the verdict."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    # 3-class, 8x8, 2-channel synthetic task sized for the tiny test network
    return synth_dataset(seed=7, n_classes=3, n_per_class=40, size=8, channels=2)


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """The full desk-scale experiment, run once per session (a few minutes)."""
    from mlpk.experiment import run_desk_experiment
    out = Path(os.environ.get("MLPK_ACCEPT_OUT") or tmp_path_factory.mktemp("desk"))
    results = run_desk_experiment(out)
    return out, results
