import numpy as np
import pytest
import torch

from condsr.image import ImageTensor

ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="long-running; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


def random_image(rs, c=3, h=16, w=16, tag="unit"):
    data = rs.random((c, h, w))
    if tag == "signed":
        data = 2 * data - 1
    return ImageTensor(data, tag)


def quantized_image(rs, c=3, h=16, w=16):
    return ImageTensor(rs.integers(0, 256, (c, h, w)) / 255.0)
