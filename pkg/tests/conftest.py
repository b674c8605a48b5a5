import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four phantoms with five perturbations each; shared by the slower tests."""
    from contourqa.dataset import Dataset, DatasetConfig, generate_dataset

    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(DatasetConfig(n_phantoms=4, n_perturbations=5, folds_k=2), root)
    return Dataset(root)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
