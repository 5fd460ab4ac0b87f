import numpy as np
import pytest

from multirotor_frs.config import ScenarioConfig


def random_spd(rng, n, cond=10.0):
    """SPD matrix with eigenvalues log-uniform in [1, cond] and a random basis."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.exp(rng.uniform(0.0, np.log(cond), n))) @ q.T


def sample_ball(rng, n_points, dim, surface=False):
    u = rng.standard_normal((n_points, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    if surface:
        return u
    return u * rng.uniform(0.0, 1.0, (n_points, 1)) ** (1.0 / dim)


def sample_ellipsoid(rng, center, shape, n_points, surface=False):
    """Uniform points inside (or on) ``{x | (x-c)' K (x-c) <= 1}``: ``c + K^{-1/2} u``."""
    w, v = np.linalg.eigh(shape)
    root_inv = v @ np.diag(w**-0.5) @ v.T
    return center + sample_ball(rng, n_points, len(center), surface) @ root_inv


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_cfg():
    return ScenarioConfig()
