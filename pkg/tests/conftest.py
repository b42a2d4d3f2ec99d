from __future__ import annotations

import numpy as np
import pytest

from gedoe.error_model import NoiseModel


@pytest.fixture
def benchmark_noise():
    return NoiseModel(1e-2 * np.diag([1.0, 0.1, 1.0]), np.eye(2))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar or vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
