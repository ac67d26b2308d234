import numpy as np
import pytest

from bendml.cases import random_instance, tiny_instance


@pytest.fixture(scope="session")
def tiny():
    return tiny_instance()


@pytest.fixture(scope="session")
def small_instances():
    """Generated instances within the oracle-sized envelope."""
    return [random_instance(s) for s in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the current test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _CRITERIA.setdefault(marker.args[0], {"ok": True, "notes": []})["notes"].append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when == "teardown" and rep.passed:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "notes": []})
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}"
                                    + (f" ({detail})" if detail else ""))
