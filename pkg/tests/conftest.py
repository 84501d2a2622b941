import pytest
import torch

from expandnet._utils import set_deterministic

ACCEPTANCE_LINES = []


def record_acceptance(criterion, passed, detail):
    """``passed=None`` marks a criterion that is deliberately not run."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture(autouse=True, scope="session")
def _pinned_determinism():
    set_deterministic(True)
    torch.set_default_dtype(torch.float32)
    yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
