"""One PASS/FAIL line per acceptance criterion in the terminal summary."""

from __future__ import annotations

import pytest

CRITERIA = {
    1: "Monte Carlo residual percentiles (open and closed loop)",
    2: "delay/quantisation sweep rows and monotonicity",
    3: "steady-state goodput and RTT comparison",
    4: "cross-station uplift and closed-loop residual P95",
    5: "handover-state row fractions",
    6: "+/-20% constant sensitivity",
    7: "calibration-free property suite",
}
_outcomes: dict[int, list[bool]] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion a test belongs to")


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the criterion of the calling test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _details.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(marker.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        tr.write_line(f"criterion {n}: {status}  {title}")
        for d in _details.get(n, []):
            tr.write_line(f"    {d}")
