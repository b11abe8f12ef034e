import numpy as np
import pytest

from nidglm import glm
from nidglm.data import CATEGORICAL, NUMERIC, Column, Dataset, FeatureSchema, generate_synthetic, split

BENCHMARK_TERMS = ["1", "x1", "x2^2", "x3", "x3^2", "x9", "x10"]


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic(20000, seed=3)


@pytest.fixture(scope="session")
def split_small(synthetic_small):
    return split(synthetic_small, (0.8, 0.1, 0.1), seed=3)


@pytest.fixture(scope="session")
def benchmark_small(split_small):
    schema = split_small.train.schema
    return glm.fit_poisson(split_small.fitting, [glm.parse_term(t, schema) for t in BENCHMARK_TERMS])


def make_dataset(n=400, seed=0, exposure=None, rate=0.3):
    """Two numerics, a 3-level and a 7-level factor, Poisson counts."""
    rng = np.random.default_rng(seed)
    schema = FeatureSchema((
        Column("a", NUMERIC),
        Column("b", NUMERIC),
        Column("f", CATEGORICAL, ("p", "q", "r")),
        Column("g", CATEGORICAL, tuple("ABCDEFG")),
    ))
    a = rng.normal(size=n)
    b = rng.uniform(-1, 1, size=n)
    f = rng.integers(3, size=n)
    g = rng.integers(7, size=n)
    v = rng.uniform(0.2, 1.0, size=n) if exposure is None else np.broadcast_to(exposure, n).astype(float)
    mu = v * rate * np.exp(0.3 * a - 0.2 * b + 0.1 * f + 0.05 * g)
    y = rng.poisson(mu)
    return Dataset(schema, y, v, {"a": a, "b": b, "f": f, "g": g})


@pytest.fixture
def toy():
    return make_dataset()
