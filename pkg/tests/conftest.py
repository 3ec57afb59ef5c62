import numpy as np
import pandas as pd
import pytest

import ipcsem
from ipcsem import simulate as sim

QUASI_SIMPLEX_MODEL = """
f1 =~ y1
f2 =~ y2
f3 =~ y3
f4 =~ y4
f2 ~ f1
f3 ~ f2
f4 ~ f3
y1 ~~ ev*y1
y2 ~~ ev*y2
y3 ~~ ev*y3
y4 ~~ ev*y4
"""

HS_STYLE_MODEL = """
visual  =~ x1 + x2 + x3
textual =~ x4 + x5 + x6
speed   =~ x7 + x8 + x9
"""


def quasi_simplex_population(beta=0.9, error_variance=0.3, waves=4):
    """Stationary latent AR(1) with unit trait variance plus measurement error."""
    idx = np.arange(waves)
    trait = beta ** np.abs(idx[:, None] - idx[None, :])
    sigma = trait + error_variance * np.eye(waves)
    return np.zeros(waves), sigma


def draw_mvn(mu, sigma, n, seed):
    rng = np.random.default_rng(seed)
    y = rng.multivariate_normal(mu, sigma, size=n, method="cholesky")
    return pd.DataFrame(y, columns=[f"y{i + 1}" for i in range(len(mu))])


def saturated_model_text(names):
    lines = []
    for i, a in enumerate(names):
        for b in names[: i + 1]:
            lines.append(f"{b} ~~ {a}")
    return "\n".join(lines)


@pytest.fixture(scope="session")
def fig1_condition():
    return ipcsem.SimCondition(
        true_diff=0.2, dif_lambda=0.0, n_per_group=500, reps=1, seed=90210
    )


@pytest.fixture(scope="session")
def fig1_data(fig1_condition):
    """Pooled two-group dataset (y1..y4 + dummy g) from the two-factor design."""
    return sim.simulate_dataset(fig1_condition, 0)


@pytest.fixture(scope="session")
def fig1_table():
    return ipcsem.parse(sim.ONE_GROUP_MODEL)


@pytest.fixture(scope="session")
def fig1_fit(fig1_table, fig1_data):
    return ipcsem.fit(fig1_table, fig1_data)


@pytest.fixture(scope="session")
def fig1_contributions(fig1_table, fig1_data, fig1_fit):
    from ipcsem.engine import extract_data

    _, mat = extract_data(fig1_table, fig1_data)
    return ipcsem.compute_d(mat, center=None, convention=fig1_fit.convention)


@pytest.fixture(scope="session")
def simplex_data():
    mu, sigma = quasi_simplex_population()
    return draw_mvn(mu, sigma, 800, seed=1234)


@pytest.fixture(scope="session")
def simplex_table():
    return ipcsem.parse(QUASI_SIMPLEX_MODEL)


@pytest.fixture(scope="session")
def simplex_fit(simplex_table, simplex_data):
    return ipcsem.fit(simplex_table, simplex_data)
