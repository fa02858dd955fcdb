from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=25, deadline=None, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def disk():
    from gbtomo.manifold import euclidean_disk

    return euclidean_disk()


@pytest.fixture(scope="session")
def curved_disk():
    from gbtomo.manifold import constant_curvature_disk

    return constant_curvature_disk(0.5)


@pytest.fixture(scope="session")
def curved_cover(curved_disk):
    from gbtomo.fermi import build_cover
    from gbtomo.manifold import geodesic_trace

    seg = geodesic_trace(curved_disk, np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    return build_cover(seg, 1.5)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def record_criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
