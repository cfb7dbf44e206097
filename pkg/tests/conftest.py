import numpy as np
import pytest

from intactlab import recipes
from intactlab.quantizer import QuantConfig, quantize_model_weights


@pytest.fixture(scope="session")
def canonical():
    return recipes.canonical_model()


@pytest.fixture(scope="session")
def sink():
    return recipes.sink_model()


@pytest.fixture(scope="session")
def sink_q3(sink):
    return quantize_model_weights(sink, QuantConfig(3, 16))


@pytest.fixture(scope="session")
def canonical_q3(canonical):
    return quantize_model_weights(canonical, QuantConfig(3, 16))


@pytest.fixture(scope="session")
def micro():
    return recipes.canonical_model(7, recipes.micro_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
