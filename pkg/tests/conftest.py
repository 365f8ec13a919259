import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gmse.multinomial import probabilities  # noqa: E402
from gmse.register import Covariate, CovariateSchema, Register  # noqa: E402

DATA = Path(__file__).resolve().parents[1] / "src" / "gmse" / "data"


def draw_instance(rng, N, K, J, pi=0.3, scale=0.5):
    """Random design, coefficients, outcomes and sample with every category sampled."""
    X = np.column_stack([np.ones(N), rng.normal(size=(N, J - 1))])
    beta = scale * rng.normal(size=(K - 1, J))
    P = probabilities(X, beta)
    u = rng.random(N)
    labels = np.minimum((u[:, None] > np.cumsum(P, axis=1)).sum(axis=1), K - 1)
    labels[:K] = np.arange(K)
    lam = (rng.random(N) < pi).astype(float)
    lam[:K] = 1.0
    Y = np.eye(K)[labels]
    return X, Y, labels, lam, beta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_instance(rng):
    return draw_instance(rng, 20, 3, 3, pi=1.0)


@pytest.fixture
def schema():
    return CovariateSchema(
        (
            Covariate("age", "categorical", ("young", "mid", "old")),
            Covariate("sex", "binary", ("M", "F")),
            Covariate("region", "categorical", ("N", "C", "S"), role="external_domain"),
        ),
        n_categories=3,
        category_labels=("low", "mid", "high"),
    )


@pytest.fixture
def toy_register(schema):
    r = np.random.default_rng(7)
    N = 60
    cols = {
        "age": r.choice(["young", "mid", "old"], N),
        "sex": r.choice(["M", "F"], N),
        "region": r.choice(["N", "C", "S"], N),
    }
    sampled = r.random(N) < 0.5
    sampled[:3] = True
    outcome = np.where(sampled, r.integers(1, 4, N), 0)
    outcome[:3] = [1, 2, 3]
    return Register(np.array([f"id{i}" for i in range(N)]), cols, sampled, np.full(N, 0.5), outcome, 3)


@pytest.fixture
def sample_paths():
    return DATA / "register.csv", DATA / "schema.json", DATA / "truth.csv"


ACCEPTANCE: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
