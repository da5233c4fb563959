import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trunlearn.dataset import BiasSpec, Dataset, gen_synthetic, sample_biased_deletion
from trunlearn.model import LossConfig, ModelSpec, TrainConfig, train

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def blobs3() -> Dataset:
    return gen_synthetic(3, 5, 150, 4.0, seed=11)


@pytest.fixture(scope="session")
def logistic3(blobs3):
    """Trained logistic model on 3-class blobs with a class-0-heavy split."""
    spec = ModelSpec("logistic", blobs3.dim, 3)
    loss_cfg = LossConfig(spec, 0.1)
    w_star = train(spec, blobs3, None, TrainConfig(tol=1e-10), loss_cfg).w
    split = sample_biased_deletion(blobs3, BiasSpec({0: 30.0}, 80, seed=3))
    w_hat = train(spec, blobs3, split.retain_indices, TrainConfig(tol=1e-10), loss_cfg).w
    return spec, loss_cfg, w_star, split, w_hat


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def regression_data(rng, n=6, d=4) -> Dataset:
    X = rng.random((n, d))
    y = X @ rng.standard_normal(d) + 0.1 * rng.standard_normal(n)
    return Dataset(X, y, 0)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """record(n, ok, detail) logs one acceptance line, echoes it and asserts ``ok``."""
    def record(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE[n] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
