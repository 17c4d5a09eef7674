import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the overall verdict."""
    def report(name, checks: dict, detail=""):
        ok = all(bool(v) for v in checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        if failed:
            line += "  failed: " + ", ".join(failed)
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
