import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedcox.survival import SurvivalDataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_data(n=40, p=5, seed=0, censor=0.4, scale=0.5, ties=False):
    """Small Cox data with a dense coefficient vector."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = scale * rng.standard_normal(p)
    T = rng.exponential(np.exp(-X @ beta))
    C = rng.exponential(np.exp(-X @ beta) * (1 - censor) / max(censor, 1e-9))
    Z = np.minimum(T, C)
    d = (T <= C).astype(int)
    d[np.argmin(Z)] = 1  # at least one event
    if ties:
        Z = np.round(Z, 1) + 0.05
        return SurvivalDataset(Z, d, X, ties="jitter", tie_seed=seed)
    return SurvivalDataset(Z, d, X)


@pytest.fixture
def small():
    return make_data()


@pytest.fixture(scope="session")
def sim_cohort_data():
    from fedcox.simulation import SimConfig, generate_dataset
    from fedcox.survival import center_covariates

    return center_covariates(generate_dataset(SimConfig(n=400, p=20, K=4), 3))
