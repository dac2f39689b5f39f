import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wind.codebook import CodebookSpec  # noqa: E402

SALT = bytes(range(32))


@pytest.fixture
def salt() -> bytes:
    return SALT


@pytest.fixture
def small_spec() -> CodebookSpec:
    return CodebookSpec(n=64, m=8, salt=SALT)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance_report.LINES):
            terminalreporter.write_line(acceptance_report.LINES[number])
