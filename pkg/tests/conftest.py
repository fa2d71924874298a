import numpy as np
import pytest

from stepstone.simulator import SimConfig, generate_chains
from stepstone.traffic import Trace, default_burst_model


def make_trace(times, dirs, sizes, capture_point="t"):
    return Trace(np.asarray(times, float), np.asarray(dirs), np.asarray(sizes), capture_point)


@pytest.fixture(scope="session")
def burst_model():
    return default_burst_model()


@pytest.fixture(scope="session")
def socat_chains(burst_model):
    return generate_chains(SimConfig(protocol_mode="socat"), 12, 7, burst_model)


@pytest.fixture(scope="session")
def mixed_chains(burst_model):
    return generate_chains(SimConfig(protocol_mode="mixed"), 12, 11, burst_model)


# --- acceptance report -------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
