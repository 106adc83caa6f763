import numpy as np
import pytest
from hypothesis import settings

from lstr.config import TrainConfig
from lstr.model import build_model
from lstr.numerics import Rng
from lstr.taskgen import generate_dataset

settings.register_profile("lstr", deadline=None, max_examples=60)
settings.load_profile("lstr")


# acceptance tests append one "PASS|FAIL <criterion>: <detail>" line each
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].lstrip("C").rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(d_model=8, alpha=4, k=6, r=2, epochs=2, batch_size=8, seed=3)


@pytest.fixture
def tiny_problems():
    return generate_dataset({1: 10, 2: 10, 3: 10}, Rng(5))


@pytest.fixture
def tiny_model(tiny_cfg, tiny_problems):
    return build_model(tiny_problems, tiny_cfg, Rng(7))


def assert_close(a, b, tol):
    np.testing.assert_allclose(a, b, rtol=0, atol=tol)
