import numpy as np
import pytest

from morlbench.env import EnvConfig, generate_dataset
from morlbench.mdp import Trajectory, make_dataset


@pytest.fixture(scope="session")
def icu_small():
    """A few hundred behavior episodes from the default simulator."""
    return generate_dataset(EnvConfig(seed=0), 300)


@pytest.fixture
def two_episodes():
    rng = np.random.default_rng(0)
    trajs = [
        Trajectory("a", rng.normal(size=(3, 4)), [0, 1, 2], [(0, 0), (0, 0), (1, 0.4)], [False, False, True]),
        Trajectory("b", rng.normal(size=(1, 4)), [1], [(0, 0.9)], [True]),
    ]
    return make_dataset(trajs, 3)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """verdict(n, ok, detail): record one acceptance line, then assert."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line
    return record
