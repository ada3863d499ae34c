import numpy as np
import pytest

from qwthn.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


ACCEPTANCE: list[str] = []
NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
        for line in NOTES:
            terminalreporter.write_line(line)
