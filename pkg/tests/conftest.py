import sys

from hypothesis import settings

# Reproducible property runs: examples derive from the test source, not the clock.
settings.register_profile("repro", derandomize=True, deadline=None, database=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
