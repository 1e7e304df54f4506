import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from fixture_runs import CRITERIA  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERIA:
        terminalreporter.write_line(line)
