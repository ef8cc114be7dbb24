import numpy as np
import pytest

from mingle.bench import generate_suite
from mingle.model import init_model, random_head


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    model = init_model([5, 7, 6], rng)
    head = random_head(4, 6, rng)
    return model, head


@pytest.fixture(scope="session")
def default_suite():
    return generate_suite(seed=0)


@pytest.fixture(scope="session")
def tiny_suite():
    return generate_suite(n_tasks=2, samples_per_class=30, test_per_class=40, seed=3)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion; lines are echoed in the summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
