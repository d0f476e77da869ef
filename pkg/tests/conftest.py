"""Acceptance summary: one PASS/FAIL line per criterion at the end of a run."""

_criteria = {}   # number -> title
_nodes = {}      # nodeid -> number
_failed = set()
_seen = set()


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            number, title = marker.args
            _criteria[number] = title
            _nodes[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _nodes.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.failed:
        _seen.add(number)
    if report.failed:
        _failed.add(number)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        if number in _failed:
            status = "FAIL"
        elif number in _seen:
            status = "PASS"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"[{status}] criterion {number}: {_criteria[number]}")
