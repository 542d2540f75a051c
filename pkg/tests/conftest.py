import numpy as np
import pytest

from ppde_lab.pathspace import PathTree, TreeProcess


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def integer_process(tree: PathTree, rng, lo: int = -4, hi: int = 4) -> TreeProcess:
    """Random integer values at every node (dyadic inputs keep DP arithmetic exact)."""
    return TreeProcess(tree, [rng.integers(lo, hi + 1, 2**k).astype(float) for k in tree.levels()])


def random_process(tree: PathTree, rng, scale: float = 1.0) -> TreeProcess:
    return TreeProcess(tree, [scale * rng.normal(size=2**k) for k in tree.levels()])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
