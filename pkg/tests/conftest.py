import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion, printed after the run."""
    module = sys.modules.get("test_acceptance")
    if module is None or not getattr(module, "RESULTS", None):
        return
    writer = terminalreporter
    writer.section("acceptance criteria")
    for name, passed, detail in module.RESULTS:
        status = "PASS" if passed else "FAIL"
        writer.write_line(f"{status}  {name}: {detail}")
