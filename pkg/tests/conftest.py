import numpy as np
import pytest

from metaland import models, tasks

TINY = models.PROFILES["tiny"]
DESK = models.PROFILES["desk"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_pool():
    return tasks.build_pool(tasks.TaskDistributionConfig(input_dim=TINY.input_dim, n_train_classes=20,
                                                         n_test_classes=10, noise_scale=0.5, master_seed=3))


@pytest.fixture(scope="session")
def desk_pool():
    return tasks.build_pool(tasks.TaskDistributionConfig())


@pytest.fixture
def tiny_episode(tiny_pool):
    return tasks.sample_task(tiny_pool, "train", 5, 2, 4, (0, 0, 0))


def perturbed_params(spec, seed, scale=0.3):
    """Xavier init plus non-zero biases so every parameter matters."""
    r = np.random.default_rng(seed)
    return models.init_params(spec, seed) + scale * r.standard_normal(spec.n_params)


# one pass/fail line per acceptance criterion, printed at the end of the run
CRITERIA: dict = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    CRITERIA[number] = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
