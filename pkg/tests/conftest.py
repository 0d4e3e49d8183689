import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spacetime_k import StudyRegion  # noqa: E402

L_SHAPE = [(0, 0), (10000, 0), (10000, 4000), (4000, 4000), (4000, 10000), (0, 10000)]


@pytest.fixture
def square():
    """10 km square observed over 100 time units."""
    return StudyRegion.rectangle(0, 0, 10000, 10000, 0, 100)


@pytest.fixture
def l_region():
    return StudyRegion(np.array(L_SHAPE, dtype=float), 0, 100)


@pytest.fixture
def unit_square():
    return StudyRegion.rectangle(0, 0, 1, 1, 0, 10)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
