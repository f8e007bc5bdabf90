import numpy as np
import pytest

from dynkin.model import MarkSpace, TimeGrid, build_tree


def tree(N, nus=(), atoms=None, T=1.0):
    atoms = atoms if atoms is not None else tuple(0.3 * (i + 1) for i in range(len(nus)))
    return build_tree(TimeGrid(T, N), MarkSpace(tuple(atoms), tuple(nus)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
