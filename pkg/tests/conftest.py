import numpy as np
import pytest
import torch

from ssl_sonar.synthetic import make_shape_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes4():
    """Small labeled synthetic corpus: 4 classes x 10 images."""
    return make_shape_dataset(10, 4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Class sizes of the object corpus (sum 2627); only the total matters to the
# split arithmetic checked below.
WATERTANK_COUNTS = {"bottle": 449, "can": 367, "chain": 226, "drink-carton": 349, "hook": 133,
                    "propeller": 137, "shampoo-bottle": 99, "standing-bottle": 65, "tire": 331,
                    "valve": 208, "wall": 263}


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts are visible without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
