"""Collects ``@pytest.mark.criterion(n)`` outcomes into one summary line per criterion."""
import pytest

_outcomes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        checks = _outcomes[n]
        ok = all(p for _, p, _ in checks)
        passed = sum(p for _, p, _ in checks)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({passed}/{len(checks)} checks)")
        for name, p, details in checks:
            for d in details:
                tr.write_line(f"    {name}: {d}")
            if not p:
                tr.write_line(f"    failed: {name}")
