import pytest

CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    _, outcomes = CRITERIA.setdefault(number, (title, []))
    outcomes.append("xfailed" if hasattr(report, "wasxfail") else report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, outcomes = CRITERIA[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        note = ""
        if status == "FAIL":
            counts = {o: outcomes.count(o) for o in sorted(set(outcomes))}
            note = " (" + ", ".join(f"{n} {o}" for o, n in counts.items()) + ")"
        terminalreporter.write_line(f"{status} criterion {number:>2}: {title}{note}")
