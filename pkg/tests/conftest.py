import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, seconds, why = results[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {title}"
        terminalreporter.write_line(line + (f" -- {why}" if why else ""))
