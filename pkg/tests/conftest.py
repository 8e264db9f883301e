import pytest

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``ACCEPTANCE n: PASS/FAIL | detail`` line for the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append((n, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
