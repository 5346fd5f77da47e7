from collections import defaultdict

import pytest

ACCEPTANCE: dict[int, list] = defaultdict(list)


@pytest.fixture
def record():
    """Log one part of an acceptance criterion: record(k, name, passed, detail)."""

    def _record(k: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[k].append((name, bool(passed), detail))
        print(f"criterion {k} [{name}]: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p for _, p, _ in parts)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}")
        for name, p, detail in parts:
            terminalreporter.write_line(f"    {'PASS' if p else 'FAIL'} {name}: {detail}")
