import numpy as np
import pytest

ACCEPTANCE_RESULTS = []


def record_criterion(name: str, passed: bool, detail: str = ""):
    """Collect one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    status = "PASS" if passed else "FAIL"
    print(f"[ACCEPTANCE] {name}: {status}  {detail}")
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(d, rng, scale=1.0):
    a = rng.standard_normal((d, 2 * d))
    return scale * (a @ a.T / (2 * d)) + 0.1 * np.eye(d)
