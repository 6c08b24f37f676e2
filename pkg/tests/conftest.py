"""Shared fixtures and the acceptance summary.

Acceptance tests carry ``@pytest.mark.criterion(n, title)`` and append
free-text details through the ``detail`` fixture; a summary section with one
PASS/FAIL line per criterion is printed at the end of the session.
"""
import pytest

RESULTS = {}


@pytest.fixture
def detail(request):
    lines = []
    request.node._acceptance_detail = lines

    def add(msg):
        lines.append(msg)
        print(msg)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    n, title = marker.args
    details = getattr(item, "_acceptance_detail", [])
    if rep.failed and rep.when != "call":
        details = details + [f"{rep.when} error: {call.excinfo.typename if call.excinfo else '?'}"]
    if n in RESULTS:  # several tests may share one criterion: all must pass
        _, ok, earlier = RESULTS[n]
        RESULTS[n] = (title, ok and rep.passed, earlier + details)
    else:
        RESULTS[n] = (title, rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, details = RESULTS[n]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}" + (f" | {'; '.join(details)}" if details else ""))
    passed = sum(ok for _, ok, _ in RESULTS.values())
    tr.write_line(f"{passed}/{len(RESULTS)} acceptance criteria passed")
