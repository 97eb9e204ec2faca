import numpy as np
import pytest

from optsel.gradcore import FactorPair, ProjectedSample, SampleGradient
from optsel.harness.config import ExperimentConfig


def make_sample(rng, shapes, T, sid=0):
    return SampleGradient(sid, tuple(
        FactorPair(l, rng.standard_normal((d1, T)), rng.standard_normal((d2, T)))
        for l, (d1, d2) in enumerate(shapes)))


def make_projected(rng, shapes, T, sid=0):
    return ProjectedSample.from_sample(make_sample(rng, shapes, T, sid))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A tiny corpus so loop/harness tests run in well under a second."""
    return ExperimentConfig().replace(**{
        "corpus.n": 400, "corpus.n_target": 40, "corpus.n_test": 100,
        "schedule.budget_fraction": 0.2, "eval_interval": 5,
    })


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)
