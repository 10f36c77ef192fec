import sys
import numpy as np
import pytest

from divflow.volume import FlowDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset(rng):
    nt, dims = 2, (4, 3, 5)
    return FlowDataset(
        magnitude=rng.random((nt,) + dims),
        velocity=rng.normal(size=(nt, 3) + dims),
        spacing=(1e-3, 2e-3, 1.5e-3),
        venc=1.5,
        reference_velocity=rng.normal(size=(nt, 3) + dims),
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
