import numpy as np
import pytest
from hypothesis import settings

from tiltmatch.verify import standard_instance

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def instance():
    """|V|=2, L=3 full-support rho_1 with a uniform[0, 1] reward table."""
    return standard_instance(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion (printed at the end)."""
    def record(number, name, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The desk maze ablation run twice with the same seed (minutes)."""
    import time

    from tiltmatch.experiments import maze_ablation

    out = []
    for k in range(2):
        root = tmp_path_factory.mktemp(f"desk{k}")
        t0 = time.time()
        results = maze_ablation(root, seed=0)
        out.append((root, results, time.time() - t0))
    return out
