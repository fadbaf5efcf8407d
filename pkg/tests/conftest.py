import os

import pytest

# one "criterion N: PASS|FAIL ..." line per acceptance criterion, filled by test_acceptance
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def acceptance_dir(tmp_path_factory):
    """Where the desk-scale runs live; LMCCA_ACCEPTANCE_DIR keeps them between sessions."""
    path = os.environ.get("LMCCA_ACCEPTANCE_DIR")
    if path:
        os.makedirs(path, exist_ok=True)
        return path
    return str(tmp_path_factory.mktemp("acceptance"))
