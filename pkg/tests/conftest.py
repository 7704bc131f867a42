import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coarse2fine.model import BehaviorBinning, Dataset, GroupObservations  # noqa: E402


def random_dataset(rng, max_groups=5, max_items=5, max_bins=4, weighted=True, labelled=False):
    K = int(rng.integers(2, max_bins + 1))
    I = int(rng.integers(1, max_groups + 1))
    groups, labels = [], []
    for i in range(I):
        J = int(rng.integers(0, max_items + 1))
        bins = rng.integers(1, K + 1, size=J)
        w = rng.uniform(0.05, 1.0, size=J) if weighted else np.ones(J)
        groups.append(GroupObservations(f"g{i}", rng.normal(0, 2), bins, w))
        labels.append(rng.integers(0, 2, size=J).astype(float))
    return Dataset(BehaviorBinning(K), tuple(groups), tuple(labels) if labelled else None)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    # K=2, one group with sigmoid(he)=0.8 and items in bins [1, 1, 2]
    he = float(np.log(4.0))
    return Dataset(BehaviorBinning(2), (GroupObservations("a", he, [1, 1, 2]),))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
