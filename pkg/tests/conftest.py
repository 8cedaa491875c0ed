import numpy as np
import pytest

from icdlm import sample_examples, world_generate

# one line per acceptance criterion, filled in by tests/test_acceptance.py and
# echoed after the run so the verdicts survive output capturing
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


@pytest.fixture(scope="session")
def tiny_world():
    return world_generate(t=3, c=3, f=4, sigma=0.7, gamma=0.85, seed=2)


@pytest.fixture(scope="session")
def tiny_pool(tiny_world):
    return sample_examples(tiny_world, 24, seed=[3, 1])


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
