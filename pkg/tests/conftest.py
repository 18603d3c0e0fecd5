"""Shared fixtures and reporting hooks.

BLAS thread pools are pinned to one thread before numpy is first imported
so that every numerical result in the suite is bitwise reproducible.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from norm.mesh import cotangent_stiffness, grid_mesh, lumped_mass
from norm.spectral import lbo_basis

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid8():
    return grid_mesh(8)


@pytest.fixture(scope="session")
def grid8_basis(grid8):
    return lbo_basis(cotangent_stiffness(grid8), lumped_mass(grid8), 8,
                     source_id=grid8.content_hash())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
