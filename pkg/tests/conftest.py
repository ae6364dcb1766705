import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not verdicts.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(verdicts.LINES):
        terminalreporter.write_line(verdicts.LINES[key])
