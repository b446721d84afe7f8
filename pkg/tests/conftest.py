import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance(request):
    """Per-criterion outcome lines, printed in the terminal summary."""
    if not hasattr(request.config, "acceptance_results"):
        request.config.acceptance_results = {}
    return request.config.acceptance_results


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
