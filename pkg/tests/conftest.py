import math

import numpy as np
import pytest

from eot_stability.measures import DiscreteMeasure, build_cost

# symmetric two-point problem: mu = nu = uniform on {0, 1}, c = |x - y|^2, eps = 1
TWO_POINT_DIAGONAL = math.e / (2.0 * (1.0 + math.e))
TWO_POINT_OFF_DIAGONAL = 1.0 / (2.0 * (1.0 + math.e))
TWO_POINT_SUM = math.log(2.0 * math.e / (1.0 + math.e))


@pytest.fixture
def pair() -> DiscreteMeasure:
    return DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])


@pytest.fixture
def two_point(pair):
    return pair, pair, build_cost(pair, pair), 1.0


@pytest.fixture
def small_instance():
    rng = np.random.default_rng(7)
    mu = DiscreteMeasure.normalized(rng.uniform(0.0, 1.0, (4, 2)), rng.uniform(0.2, 1.0, 4))
    nu = DiscreteMeasure.normalized(rng.uniform(0.0, 1.0, (3, 2)), rng.uniform(0.2, 1.0, 3))
    return mu, nu, build_cost(mu, nu), 0.5


@pytest.fixture
def write_config(tmp_path):
    import json

    def write(data: dict, name: str = "experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return write
