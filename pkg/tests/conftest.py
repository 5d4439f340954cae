import numpy as np
import pytest
import torch

from mcdet.model import DetectorConfig

torch.set_num_threads(1)

SMALL_ANCHORS = (((40.0, 40.0), (56.0, 48.0), (72.0, 72.0)), ((12.0, 12.0), (20.0, 24.0), (28.0, 28.0)))


@pytest.fixture
def small_config():
    return DetectorConfig(num_classes=3, input_size=96, anchor_sizes=SMALL_ANCHORS,
                          channel_widths=(4, 8, 8, 16, 16, 32, 32), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
