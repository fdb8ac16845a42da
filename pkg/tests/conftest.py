import pytest

from navr1.dataengine import DatasetConfig, generate_records


@pytest.fixture(scope="session")
def tiny_records():
    """Records from a handful of small worlds, split by split name."""
    records, _ = generate_records(DatasetConfig(worlds=8, episodes_per_world=2, n=6), workers=1)
    return records


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    """Record (and print) one acceptance verdict line."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
