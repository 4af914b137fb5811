import sys
import time
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "metric oracles (IoU, AUC, CIoU, NSA)",
    2: "formula units (masked average, class maps, filter, softmax, KL)",
    3: "gradient checks (matching BCE, combined stage-2 loss)",
    4: "K-means contract",
    5: "toy end-to-end (NMI, CIoU@0.3, NSA)",
    6: "ablation directions (product filter, alternation)",
    7: "determinism (manifests, loss trajectories)",
}

# Wall-clock budget per criterion in seconds; exceeding it fails the criterion.
BUDGETS = {1: 30, 2: 30, 3: 300, 4: 60}

_outcomes: dict[int, list[tuple[str, str, float]]] = defaultdict(list)
_details: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = int(marker.args[0])
    if rep.when == "call" or (rep.when == "setup" and (rep.failed or rep.skipped)):
        state = "passed" if rep.passed else ("skipped" if rep.skipped else "failed")
        _outcomes[n].append((item.name, state, rep.duration))
        for name, value in item.user_properties:
            if name == "detail":
                _details[n].append(str(value))


@pytest.fixture
def detail(record_property):
    """Attach a human-readable measurement to the criterion summary."""
    def add(text):
        record_property("detail", text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN  {CRITERIA[n]}")
            continue
        states = {s for _, s, _ in runs}
        verdict = "FAIL" if "failed" in states else ("SKIP" if states == {"skipped"} else "PASS")
        secs = sum(d for _, _, d in runs)
        if n in BUDGETS and secs > BUDGETS[n] and verdict == "PASS":
            verdict = "FAIL"
            extra_budget = f"over budget {BUDGETS[n]}s"
        else:
            extra_budget = ""
        extra = "; ".join(_details.get(n, []) + ([extra_budget] if extra_budget else []))
        tr.write_line(f"criterion {n}: {verdict}  {CRITERIA[n]}  [{len(runs)} tests, {secs:.1f}s]"
                      + (f"  {extra}" if extra else ""))

