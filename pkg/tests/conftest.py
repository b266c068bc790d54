import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from _criteria import LINES  # noqa: E402
from helpers import toy_dataset  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_dataset():
    return toy_dataset()
