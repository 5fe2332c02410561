import os

import numpy as np
import pytest

from feinn.mesh import CoarseMesh, new_forest, refine_uniform, unit_square

RUN_SLOW = os.environ.get("RUN_SLOW", "") not in ("", "0")

L_SHAPE_CELLS = [
    (0.0, 0.0, 1.0, 1.0),
    (-1.0, 0.0, 1.0, 1.0),
    (0.0, -1.0, 1.0, 1.0),
]


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow; set RUN_SLOW=1 to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square2():
    """Unit square refined twice: 16 leaves."""
    return unit_square(2)


@pytest.fixture
def lshape():
    return new_forest(CoarseMesh.from_cells(L_SHAPE_CELLS))


@pytest.fixture
def lshape2(lshape):
    return refine_uniform(lshape, 2)
