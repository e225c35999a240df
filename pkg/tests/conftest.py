from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mlfpca.basis import build_basis
from mlfpca.model import designs_from_blocks
from mlfpca.simulate import SimDesign, generate

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sim_small():
    """A modest simulated panel shared by fitter tests."""
    return generate(SimDesign(M=40, n=5, seed=11))


@pytest.fixture(scope="session")
def sim_default():
    return generate(SimDesign(seed=3))


@pytest.fixture
def unit_basis():
    return build_basis("bspline-cubic", [0.0, 1.0])


def random_blocks(rng, M=3, n=(2, 3), N=(2, 5), p=4, scale=1.0):
    """Random O(1) designs with ragged replicates and observation counts."""
    blocks = []
    for _ in range(M):
        reps = []
        for _ in range(rng.integers(n[0], n[1] + 1)):
            k = int(rng.integers(N[0], N[1] + 1))
            reps.append((np.sort(rng.uniform(0, 1, k)), rng.normal(size=k), scale * rng.normal(size=(k, p))))
        blocks.append(reps)
    return designs_from_blocks(blocks)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
