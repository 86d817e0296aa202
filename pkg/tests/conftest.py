import numpy as np
import pytest

from tlsan.ingest import build_dataset
from tlsan.synth import SynthSpec, generate

SMALL_SPEC = SynthSpec(n_users=50, n_items=40, n_categories=4, seed=3)


@pytest.fixture(scope="session")
def small_raw():
    reviews, categories, truth = generate(SMALL_SPEC)
    return reviews, categories, truth


@pytest.fixture(scope="session")
def small_dataset(small_raw):
    reviews, categories, _ = small_raw
    return build_dataset(reviews, categories, max_long=10, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns a callable ``(label, ok, detail)``."""
    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
