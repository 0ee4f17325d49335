"""
Shared pytest fixtures and the --run-slow switch
"""

import pytest

import app_logger
from corpus import ProcedureInstance
from sgr_config import TrainConfig
from synthetic import generate_corpus


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the slow training acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def issue_log(tmp_path):
    """Every test writes its issue log to a private file"""
    logger = app_logger.set_log_file(str(tmp_path / "logs" / "issues.json"))
    yield logger
    app_logger._logger = None


@pytest.fixture
def water_instance():
    """Water moves soil -> root -> leaf and turns into sugar in the leaf"""
    return ProcedureInstance(
        para_id="p1",
        sentences=[
            "Water moves from the soil to the root.",
            "The water flows to the leaf.",
            "The water turns into sugar in the leaf.",
        ],
        entities=["water", "sugar"],
        prompt="The water is in the soil.",
        gold_states=[["M", "M", "D"], ["O_A", "O_A", "C"]],
        gold_locations=[["root", "leaf", "-"], ["-", "-", "leaf"]],
        gold_initial_locations=["soil", "-"],
    ).validate()


@pytest.fixture
def tiny_config():
    return TrainConfig(hidden_size=8, num_layers=1, num_heads=2, max_len=32, epochs=2,
                       batch_size=4, seed=3, learning_rate=1e-2)


@pytest.fixture
def synthetic_corpus():
    return generate_corpus(6, seed=7)
