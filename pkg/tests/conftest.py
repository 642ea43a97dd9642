import numpy as np
import pytest
from hypothesis import settings

from nlosloc.geometry import EnvironmentGrid

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def grid(occ, split="lower", **kw) -> EnvironmentGrid:
    return EnvironmentGrid.from_occupancy(np.asarray(occ, dtype=np.uint8), split=split, **kw)


@pytest.fixture
def open8():
    return grid(np.zeros((8, 8)), split="none")
