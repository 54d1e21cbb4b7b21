import numpy as np
import pytest

from signal_lab import SampleRecord, SampleSet, Signal, sample_function, TRAIN


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run full-size training and timing checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; use --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    """cos(10t) sampled so that both endpoints sit on extrema."""
    return sample_function(lambda t: np.cos(10 * t), 0.0, 0.9 * np.pi, 1024)


def make_average_set(n=128, count=4, trend_slope=0.2):
    """Records whose label is an oscillation and whose input adds a linear trend."""
    records = []
    for k in range(count):
        osc = sample_function(lambda t, k=k: np.cos((6 + 2 * k) * t), 0.0, 3.0, n)
        trend = trend_slope * osc.t
        records.append(SampleRecord(osc.with_samples(osc.samples + trend), (osc,), "toy", {"k": float(k)}, trend))
    return SampleSet(records, [TRAIN] * count)


def make_identity_set(n=64, count=3):
    """Records whose single label equals the input."""
    records = []
    for k in range(count):
        x = sample_function(lambda t, k=k: np.sin((3 + k) * t) + 0.1 * t, 0.0, 3.0, n)
        records.append(SampleRecord(x, (x,), "identity"))
    return SampleSet(records, [TRAIN] * count)


@pytest.fixture
def average_set():
    return make_average_set()


@pytest.fixture
def identity_set():
    return make_identity_set()


@pytest.fixture
def example_signal():
    return Signal(np.cos(np.linspace(0, 20, 256)))
