"""Shared pytest plumbing: the acceptance suite records one verdict line per
criterion and we print them all in the terminal summary, so the pass/fail
table is visible even when stdout capture is on."""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(
            f"AC{criterion} {'PASS' if ok else 'FAIL'} — {detail}"
        )

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(line)
