import pytest

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, name, ok, detail, elapsed, budget):
        in_time = elapsed < budget
        status = "PASS" if ok and in_time else "FAIL"
        ACCEPTANCE_LINES.append((number, f"criterion {number:2d} {status}  {name}: {detail} "
                                         f"[{elapsed:.1f}s, budget {budget:g}s]"))
        return ok and in_time

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
