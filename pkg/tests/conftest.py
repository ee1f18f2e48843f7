import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "distillation gradient identity",
    3: "loss unit values",
    4: "temperature scheduler",
    5: "faithfulness",
    6: "degenerate-regime equivalences",
    7: "capacity dilemma trend",
    8: "distillation improves the student",
    9: "ratio vs accuracy sweep",
    10: "alpha = 0 sanity mode",
    11: "reproducibility",
}

_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        _results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:2d} {name}: not run")
