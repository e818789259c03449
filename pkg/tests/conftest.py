import numpy as np
import pytest

from shapeflow.geometry.shapes import Primitive, ShapeSpec


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def sphere_spec():
    return ShapeSpec([Primitive("sphere", {"radius": 0.5})])


@pytest.fixture
def box_spec():
    return ShapeSpec([Primitive("box", {"half": [0.3, 0.3, 0.3]})])


@pytest.fixture
def torus_spec():
    return ShapeSpec([Primitive("torus", {"major": 0.5, "minor": 0.2})])


def norm_rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return 2.0 * np.linalg.norm(a - b) / denom
