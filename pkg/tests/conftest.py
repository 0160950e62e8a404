import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from extsens import PairedSample, pairs_from_differences

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, text = marker.args
    prev = _CRITERIA.get(num, (text, None))[1]
    if report.failed:
        state = "FAIL"
    elif report.skipped:
        state = prev or "SKIP"
    elif report.when == "call":
        state = "FAIL" if prev == "FAIL" else "PASS"
    else:
        return
    _CRITERIA[num] = (text, state)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        text, state = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {state}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_sample(rng, I, effect=0.3, scale=1.0):  # noqa: E741
    """Difference-in-means scores for ``I`` random pairs."""
    from extsens import build_scores

    y = effect + scale * rng.standard_normal(I)
    return build_scores(pairs_from_differences(y))


def sample_from_q(q):
    q = np.asarray(q, dtype=float)
    z = np.zeros_like(q, dtype=int)
    z[:, 0] = 1
    return PairedSample(q=q, z=z)
