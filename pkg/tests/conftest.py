"""Terminal reporting glue: print one pass/fail line per acceptance criterion."""

_acceptance_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        if report.passed:
            outcome = "PASS"
        elif report.skipped:
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        _acceptance_outcomes[name] = outcome
    elif report.when == "setup" and (report.failed or report.skipped):
        _acceptance_outcomes[name] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_acceptance_outcomes):
        terminalreporter.write_line(f"{name}: {_acceptance_outcomes[name]}")
