import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from campaign import n80_instance, run_n80_campaign  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def n80_campaign(request):
    """(instance with secret, dataset, shard directory) of the cached n=80 campaign."""
    shard_dir = request.config.cache.mkdir("picante-n80-campaign")
    dataset = run_n80_campaign(shard_dir)
    return n80_instance(), dataset, Path(shard_dir)


@pytest.fixture
def acceptance_line():
    def emit(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
