import logging

import numpy as np
import pytest

from iuqval.benchmark import FunctionModel
from iuqval.core import Dataset, PriorSpec


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR)


def make_dataset(X, y, var, domain="IUQ", design_names=None, qoi_names=None, prefix="t"):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    var = np.broadcast_to(np.asarray(var, dtype=float), y.shape)
    design_names = design_names or tuple(f"x{i}" for i in range(X.shape[1]))
    qoi_names = qoi_names or tuple(f"y{j}" for j in range(y.shape[1]))
    return Dataset([f"{prefix}{i}" for i in range(len(X))], X, y, var, [domain] * len(X), design_names, qoi_names)


@pytest.fixture
def identity_model():
    """Scalar model y = theta with one dummy design variable."""
    return FunctionModel(lambda X, th: np.broadcast_to(th[:, :1], (max(len(X), len(th)), 1)), ["x0"], ["theta"], ["y0"])


@pytest.fixture
def unit_prior():
    return PriorSpec([0.0], [5.0], [1.0], ["theta"])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
