import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            m = _CRITERION.search(nodeid)
            if m:
                n = int(m.group(1))
                verdicts[n] = "PASS" if outcome == "passed" else "FAIL"
    if verdicts:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for n in sorted(verdicts):
            terminalreporter.write_line(f"  criterion {n}: {verdicts[n]}")
