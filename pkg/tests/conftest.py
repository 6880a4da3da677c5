import numpy as np
import pytest

from switchopt.model import double_tank


@pytest.fixture(scope="session")
def spec():
    return double_tank()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(fun, z, h_scale=1e-6):
    """Column-wise central differences of a vector (or scalar) function."""
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(len(z)):
        h = h_scale * (1.0 + abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((np.asarray(fun(zp), dtype=float) - np.asarray(fun(zm), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(analytic, numeric):
    """Entry-wise ``|a - d| / max(1, |a|, |d|)``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
