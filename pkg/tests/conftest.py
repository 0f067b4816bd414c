import sys
from pathlib import Path

import pytest

from finalbn import Hyper, SkewProtocol, synthetic_splits

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []

TINY_PROTOCOL = SkewProtocol((40, 8), (10, 3), (12, 12))
TINY_HYPER = Hyper(epochs=2, batch_size=16, hidden_size=8, trunk_channels=(4, 8))


@pytest.fixture(scope="session")
def tiny_splits():
    return synthetic_splits(TINY_PROTOCOL, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
