"""Shared pytest hooks.

Prints one verdict line per release check at the end of the run, so the
acceptance status is readable without scrolling through the full log.
"""

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if ACCEPTANCE_FILE not in nodeid:
                continue
            if status == "passed" and report.when != "call":
                continue
            name = nodeid.split("::")[-1]
            lines.append((name, "PASS" if status == "passed" else "FAIL"))
    if not lines:
        return
    terminalreporter.section("release checks")
    for name, verdict in sorted(lines):
        terminalreporter.write_line(f"{verdict}: {name}")
