import pytest
import torch

torch.set_num_threads(1)

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion this test checks")
    config.addinivalue_line("markers", "slow: end-to-end training runs")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = getattr(report, "_criterion", None)
    if marker is not None:
        _CRITERIA.append((marker, report.passed))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = (m.args[0], m.args[1], item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, text, name), passed in sorted(_CRITERIA, key=lambda c: (c[0][0], c[0][2])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:>2}. {text} ({name})")
