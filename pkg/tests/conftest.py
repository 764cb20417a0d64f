import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patchdropout.data import make_synthetic


@pytest.fixture(scope="session")
def bench():
    """The full desk-scale benchmark: 4000/500/500 images at 32x32."""
    return make_synthetic(seed=0)


@pytest.fixture(scope="session")
def small_bench():
    return make_synthetic(seed=1, n_train=256, n_val=64, n_test=64)


@pytest.fixture(scope="session")
def run_cache():
    """Trained models shared across test modules, keyed by config + data hash."""
    return {}


# acceptance reporting: tests marked criterion(n, title) get one summary line each

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        number, title = mark.args
        _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})["notes"].append(text)
        print(text)

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry["notes"].append(msg.splitlines()[0][:160])
    elif rep.skipped:
        entry["ok"] = False
        entry["notes"].append("skipped")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
