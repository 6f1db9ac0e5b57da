import pytest

_VERDICTS: dict[int, list[tuple[bool, str]]] = {}


class CriterionReport:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, number: int, ok: bool, detail: str) -> None:
        _VERDICTS.setdefault(number, []).append((bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def criteria():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        entries = _VERDICTS[number]
        ok = all(e[0] for e in entries)
        details = "; ".join(e[1] for e in entries)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {details}")
