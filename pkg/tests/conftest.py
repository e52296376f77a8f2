import numpy as np
import pytest

# criterion number -> verdict line, filled by test_acceptance.py
VERDICTS = {}


def record(criterion: int, passed: bool, detail: str):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    VERDICTS[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
