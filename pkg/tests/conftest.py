import warnings

import numpy as np
import pytest

from lodtr import lod, problem as pb
from lodtr.stability import SurrogateConstants


@pytest.fixture(autouse=True)
def _quiet_estimator_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def tiny():
    """Tiny benchmark: problem, objective, mu0, ell and its PG-LOD discretization."""
    prob, obj, mu0, ell = pb.build_benchmark(preset="tiny", seed=0)
    return prob, obj, mu0, lod.LodDiscretization(prob, ell)


@pytest.fixture(scope="session")
def tiny_constants(tiny):
    prob, obj, _, disc = tiny
    return SurrogateConstants(disc, obj)


def random_mus(problem, n, seed):
    rng = np.random.default_rng(seed)
    return [rng.uniform(problem.lower, problem.upper) for _ in range(n)]


# -- one status line per acceptance criterion --------------------------------
_AC_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n = mark.args[0]
    if rep.failed or (rep.when == "call" and n not in _AC_RESULTS):
        _AC_RESULTS[n] = (rep.passed and not rep.failed, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_AC_RESULTS):
        ok, name = _AC_RESULTS[n]
        terminalreporter.write_line(f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {name}")
