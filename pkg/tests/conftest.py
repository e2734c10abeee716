import itertools

from acceptance_log import RESULTS


def _order(key: str):
    digits = "".join(itertools.takewhile(str.isdigit, key))
    return (int(digits) if digits else 99, key)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=_order):
        passed, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
