import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from topoemu import bundled_experiment  # noqa: E402
from topoemu.topology import load_experiment  # noqa: E402

CRITERIA = {
    1: "dumbbell plateaus match published values and oracle",
    2: "collapse equals shortest-path oracles on random graphs",
    3: "sharing-model property suite",
    4: "wire protocol round trip and sizes",
    5: "1/2/4 managers over loopback match single process",
    6: "snapshot schedule and reachability of the event listing",
    7: "scale-free collapse at 1000/2000/4000 elements",
}

_outcomes: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_runtest_logreport(report):
    item_marks = getattr(report, "criterion", None)
    if item_marks is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(item_marks, []).append((report.nodeid, report.outcome, report.detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args[0]
        report.detail = getattr(item, "criterion_detail", "")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n}: NOT RUN  {title}")
            continue
        ok = all(outcome == "passed" for _, outcome, _ in results)
        details = "; ".join(d for _, _, d in results if d)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        tr.write_line(line + (f"  [{details}]" if details else ""))


@pytest.fixture
def record(request):
    """Attach a short measurement to the acceptance summary line."""
    parts: list[str] = []

    def add(text: str):
        parts.append(text)
        request.node.criterion_detail = ", ".join(parts)

    return add


def load(name: str):
    return load_experiment(bundled_experiment(name))


@pytest.fixture(scope="session")
def dumbbell():
    return load("dumbbell-6")


@pytest.fixture(scope="session")
def listing():
    return load("listing")


@pytest.fixture(scope="session")
def figure1():
    return load("figure1")


def close(a, b, rel=1e-9):
    return math.isclose(a, b, rel_tol=rel, abs_tol=rel)
