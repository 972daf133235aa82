import numpy as np
import pytest
from hypothesis import settings

from ppgnet.prepare import prepare_dataset
from ppgnet.synth import synth_cohort

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_cohort():
    return synth_cohort(3, 40.0, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    ds, _ = prepare_dataset(small_cohort)
    return ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
