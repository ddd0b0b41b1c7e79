import math
import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from objlidar.geometry import SensorConfig

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def kitti():
    return SensorConfig(64, 1024, math.radians(3.0), math.radians(-25.0), 80.0)


@pytest.fixture
def small_sensor():
    return SensorConfig(32, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, title, limit_s, body)`` runs ``body() -> (ok, detail)``, times it,
    records one PASS/FAIL line and fails the test if the check or the time limit fails."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def run(n, title, limit_s, body):
        t0 = time.perf_counter()
        try:
            ok, detail = body()
        except Exception as exc:  # recorded, then re-raised for pytest
            lines.append((n, f"criterion {n:>2} FAIL  {title}: {type(exc).__name__}: {exc}"))
            raise
        elapsed = time.perf_counter() - t0
        in_time = elapsed < limit_s
        verdict = "PASS" if ok and in_time else "FAIL"
        lines.append((n, f"criterion {n:>2} {verdict}  {title}: {detail}; {elapsed:.1f}s (limit {limit_s:g}s)"))
        print(lines[-1][1])
        assert ok, detail
        assert in_time, f"took {elapsed:.1f}s, limit {limit_s}s"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
