import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Acceptance criteria register one line each; printed after the test
# summary so they are visible even with output capture enabled.
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((criterion, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:2d}: {status} — {detail}")
