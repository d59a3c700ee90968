"""Shared fixtures plus a terminal summary that prints one pass/fail line
per acceptance criterion."""

from __future__ import annotations

import pytest

from subnet_unlearn.scenario import Scenario

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" in report.nodeid:
        if report.when == "call" or (report.when == "setup" and report.failed):
            _acceptance[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance):
        name = nodeid.split("::")[-1].removeprefix("test_")
        word = "PASS" if _acceptance[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(f"{word} {name}")


def tiny_scenario(seed: int, tasks: int = 3, unlearns: int = 1, **kw) -> Scenario:
    params = dict(input_dim=4, classes_per_task=2, train_per_class=12,
                  test_per_class=12, spread=10.0, noise=1.0)
    params.update(kw)
    return Scenario(seed=seed, tasks=tasks, unlearns=unlearns, **params)


@pytest.fixture
def tiny_suite():
    return tiny_scenario(5).suite_for_seed(5)
