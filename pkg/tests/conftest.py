import time

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget_s): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    t0 = time.perf_counter()
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        number, title, budget = m.args
        _RESULTS[number] = {"title": title, "budget": budget,
                            "elapsed": time.perf_counter() - t0,
                            "ok": outcome.excinfo is None}


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r["ok"] else "FAIL"
        tr.write_line(f"[{status}] criterion {n:2d}: {r['title']} "
                      f"({r['elapsed']:.1f} s, budget {r['budget']} s)")
    passed = sum(r["ok"] for r in _RESULTS.values())
    tr.write_line(f"{passed}/{len(_RESULTS)} criteria passed")


@pytest.fixture
def within_budget(request):
    """Call at the end of a criterion test to enforce its wall-clock budget."""
    t0 = time.perf_counter()

    def check():
        m = request.node.get_closest_marker("criterion")
        elapsed = time.perf_counter() - t0
        assert elapsed < m.args[2], f"took {elapsed:.1f} s, budget {m.args[2]} s"
        return elapsed

    return check
