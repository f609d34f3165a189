import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Records one acceptance line; the lines are printed after the test session."""
    def _report(number: int, title: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  {number:2d}. {title}: {detail}")
    n_ok = sum(r[2] for r in _ACCEPTANCE)
    terminalreporter.write_line(f"{n_ok}/{len(_ACCEPTANCE)} criteria passed")
