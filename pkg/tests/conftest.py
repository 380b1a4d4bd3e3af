import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from equidiag.group import make_rng
from equidiag.models import init_parameters
from equidiag.tasks import Dataset, SyntheticTask, make_task

settings.register_profile("equidiag", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("equidiag")


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture(scope="session")
def small_task():
    return make_task(SyntheticTask(atom_count=4, sample_count=64, heldout_count=16, seed=3))


def random_dataset(rng, samples: int, atoms: int) -> Dataset:
    return Dataset(rng.standard_normal((samples, 3 * atoms)), rng.standard_normal((samples, 3 * atoms)))


def small_model(kind: str, atoms: int = 3, seed: int = 0):
    hidden = {"coord-mlp": (6,), "invariant-graph-head": (5, 4), "equivariant-baseline": (5,)}[kind]
    return init_parameters(kind, atoms, hidden, seed)


KINDS = ("coord-mlp", "invariant-graph-head", "equivariant-baseline")


# ------------------------------------------------- acceptance-criteria report


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion with a PASS/FAIL line")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    item.config._criteria[mark.args[0]] = (mark.args[1], rep.passed, detail, rep.duration)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail, seconds = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}  [{seconds:.1f}s]  {detail}")
