import pytest


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion, printed in the summary."""
    lines = request.config.stash.setdefault(_KEY, [])

    def report(criterion: int, ok: bool, detail: str) -> bool:
        lines.append((criterion, "PASS" if ok else "FAIL", detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return report


_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"[{status}] criterion {crit}: {detail}")
