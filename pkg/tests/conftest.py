import time

import pytest

from fedbat import theory

# default theorem-mode problem, shared by the theory tests and the acceptance suite
THEORY_DEFAULTS = dict(clients=8, dim=20, heterogeneity=1.0, problem_seed=0, tau=5, rounds=1000, seeds=10,
                       batch_size=2)


@pytest.fixture(scope="session")
def default_problem():
    d = THEORY_DEFAULTS
    return theory.make_problem(d["clients"], d["dim"], d["heterogeneity"], d["problem_seed"])


def _run(problem, control):
    d = THEORY_DEFAULTS
    start = time.perf_counter()
    run = theory.run_theorem_mode(problem, d["tau"], d["rounds"], seeds=d["seeds"], control=control,
                                  batch_size=d["batch_size"])
    run.seconds = time.perf_counter() - start
    return run


@pytest.fixture(scope="session")
def theorem_run(default_problem):
    return _run(default_problem, control=False)


@pytest.fixture(scope="session")
def control_run(default_problem):
    return _run(default_problem, control=True)


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
