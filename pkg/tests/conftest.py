import math

import numpy as np
import pytest

from ce_forge.graph_store import from_edges
from ce_forge.model_runner import PredictionTable

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        _ACCEPTANCE.append((str(number), title, "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


def random_graph(rng, n, p_edge=None, mean_degree=3.0):
    """Erdos-Renyi style graph with roughly ``mean_degree`` average degree."""
    if p_edge is None:
        p_edge = min(1.0, mean_degree / max(n - 1, 1))
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p_edge
    return from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def planted_bundles(seed, n=2000, d=16, bundles=10, noise=2.0, classes=3):
    """Points around ``bundles`` random unit directions, with random predicted labels.

    ``noise`` is the expected norm of the isotropic Gaussian offset added to
    each unit center, so bundles overlap substantially at the default.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((bundles, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    member = rng.integers(0, bundles, n)
    X = centers[member] + noise * rng.standard_normal((n, d)) / math.sqrt(d)
    labels = rng.integers(0, classes, n)
    return X, PredictionTable(predicted=labels, num_classes=classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
