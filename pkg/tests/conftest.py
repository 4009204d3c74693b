"""Shared fixtures plus the per-criterion pass/fail summary of the acceptance suite."""

from __future__ import annotations

import time

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        _CRITERIA[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")


class Timed:
    """Result of a fixture-level computation together with its wall time."""

    def __init__(self, value, seconds: float):
        self.value = value
        self.seconds = seconds


@pytest.fixture(scope="session")
def default_pipeline():
    from milco.training import Pipeline, TrainConfig

    return Pipeline.build(TrainConfig())


@pytest.fixture(scope="session")
def default_sap(default_pipeline):
    """SAP on the default toy config, timed (shared by the convergence and ablation criteria)."""
    t0 = time.perf_counter()
    result = default_pipeline.sap()
    return Timed(result, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def ablation_report(default_pipeline, default_sap):
    from milco.training import run_ablation_matrix

    t0 = time.perf_counter()
    report = run_ablation_matrix(default_pipeline.cfg, pipeline=default_pipeline, sap_result=default_sap.value)
    return Timed(report, time.perf_counter() - t0)
