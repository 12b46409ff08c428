import os

import pytest

from sched_forge.simulator import EpisodeConfig

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.addinivalue_line("markers", "slow: long-running training test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        # several tests may share a criterion; any failure sticks
        if _criteria.get(number, ("",))[0] != "FAIL":
            _criteria[number] = (status, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result()._criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")


@pytest.fixture
def small_cluster():
    return EpisodeConfig(total_nodes=10, window=8, check_invariants=True)


@pytest.fixture(scope="session")
def sdsc_sp2_path():
    path = os.environ.get("SCHED_FORGE_SDSC_SP2")
    if not path or not os.path.exists(path):
        pytest.skip("set SCHED_FORGE_SDSC_SP2 to the SDSC-SP2 SWF log to run this check")
    return path
