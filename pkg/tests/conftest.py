import numpy as np
import pytest

from fedring.datagen import make_federation
from fedring.pp_gan import GanTrainConfig, train_gan


def pytest_addoption(parser):
    parser.addoption("--skip-acceptance", action="store_true", help="Skip the acceptance suite.")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-acceptance"):
        skip = pytest.mark.skip(reason="--skip-acceptance")
        for item in items:
            if "acceptance" in item.keywords:
                item.add_marker(skip)


@pytest.fixture(scope="session")
def small_fed():
    """Three-node non-iid gauss2d federation, small enough for protocol tests."""
    return make_federation("gauss2d", "non_iid", 3, 40, seed=5)


@pytest.fixture(scope="session")
def small_gens(small_fed):
    gens = {}
    cfg = GanTrainConfig(phase1_iters=60, phase2_iters=20, lambda_pp=0.1, log_every=20)
    for i, node in enumerate(small_fed.nodes):
        res = train_gan(node.train_x, node.train_y, cfg, seed=100 + i)
        gens[i] = (res.g_spec, res.g_params)
    return gens


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
