ACCEPTANCE_MARKER = "test_acceptance.py::test_criterion_"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    outcomes = {}
    for key, verdict in (("passed", "PASS"), ("failed", "FAIL"),
                         ("error", "FAIL")):
        for report in terminalreporter.stats.get(key, []):
            nodeid = getattr(report, "nodeid", "")
            if ACCEPTANCE_MARKER in nodeid:
                name = nodeid.split("::test_criterion_", 1)[1]
                outcomes[name.replace("_", " ")] = verdict
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(outcomes):
        terminalreporter.write_line(f"[{outcomes[name]}] criterion {name}")
