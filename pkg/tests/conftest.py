import numpy as np
import pytest

from vrcodec.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(array, dtype=np.float64):
    """A float64 leaf that takes part in differentiation."""
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


# acceptance criterion -> (status, detail); filled by test_acceptance.py
CRITERIA: dict[int, tuple[str, str]] = {}


def report(number: int, passed: bool, detail: str, status: str | None = None) -> None:
    status = status or ("PASS" if passed else "FAIL")
    CRITERIA[number] = (status, detail)
    print(f"criterion {number:>2}: {status}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
