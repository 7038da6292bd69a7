_criteria = {}


def pytest_runtest_logreport(report):
    # one line per acceptance criterion, carrying the test's real outcome
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = props.get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _criteria[props["criterion"]] = f"criterion {props['criterion']}: {verdict}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_criteria):
            terminalreporter.write_line(_criteria[key])
