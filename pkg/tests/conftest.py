import os
import tempfile

# kernel tables are cached per test session, never in the user's cache
os.environ.setdefault("MSAD_CACHE_DIR", tempfile.mkdtemp(prefix="msad-test-cache-"))
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import pytest  # noqa: E402

ACCEPTANCE = {}


@pytest.fixture
def acceptance_record():
    """Record one acceptance verdict: ``record(number, passed, detail)``."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
