from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tandem.sim import build_world, default_waypoints
from tandem.trials import robot_params, teach_run

settings.register_profile("tandem", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tandem")

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[2].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """``report(criterion, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""

    def _report(criterion, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)
        return ok

    return _report


@pytest.fixture(scope="session")
def loop_world():
    return build_world("corridor-loop", 0)


@pytest.fixture(scope="session")
def loop_route(loop_world):
    """Jackal teach run around the corridor loop."""
    return teach_run(loop_world, default_waypoints(loop_world), robot_params("jackal"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def textured(rng, h, w):
    """Smooth-ish random texture: white noise plus a few horizontal harmonics."""
    x = np.arange(w)[None, :]
    img = rng.normal(0.0, 1.0, (h, w))
    for _ in range(3):
        f, ph = rng.uniform(0.05, 0.5), rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.5, 2.0) * np.sin(f * x + ph) * rng.normal(1.0, 0.3, (h, 1))
    return img
