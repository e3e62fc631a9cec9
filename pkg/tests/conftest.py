import re
import time

import pytest

from modelbridge import experiment as ex

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def default_cfg():
    return ex.ExperimentConfig()


@pytest.fixture(scope="session")
def default_contexts():
    """Seed -> prepared context for the default config, filled by the first experiment that needs it."""
    return {}


@pytest.fixture(scope="session")
def default_run(default_cfg, default_contexts):
    """The default five-seed experiment, run once from scratch and timed."""
    start = time.perf_counter()
    report = ex.run_experiment(default_cfg, default_contexts)
    return report, time.perf_counter() - start


@pytest.fixture()
def detail(request):
    """Record a one-line summary for the acceptance report."""
    def record(text):
        request.node.user_properties.append(("detail", text))
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = _CRITERION.match(item.name)
    if not match or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    text = "; ".join(v for k, v in item.user_properties if k == "detail")
    if report.failed:
        reason = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else "error"
        text = f"{text}; {reason}" if text else reason
    _results[int(match.group(1))] = ("PASS" if report.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, text = _results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
