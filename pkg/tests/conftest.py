import numpy as np
import pytest

from ghostdiff.optics import OpticalConfig, TransmissionObject
from ghostdiff.specklefield import GridAxis

PERIOD = 12.5
REFERENCE_GRID = GridAxis.centered(1024, PERIOD / 32)


@pytest.fixture
def grid1024():
    return REFERENCE_GRID


@pytest.fixture
def optics():
    return OpticalConfig(0.532, 50.0)


@pytest.fixture
def tgbs():
    return TransmissionObject.square_phase_grating(PERIOD, 4.2, 0.84 * np.pi)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def record_criterion(request):
    """Record one pass/fail line for the end-of-run acceptance summary."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}" + (f" | {detail}" if detail else "")
        request.config.stash[_CRITERIA].append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
