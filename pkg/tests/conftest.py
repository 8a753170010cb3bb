import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``with criterion(name) as note:`` records one PASS/FAIL line; ``note`` collects details."""
    lines = request.config.stash[_CRITERIA]

    @contextmanager
    def check(name):
        note = {}
        try:
            yield note
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            lines.append(f"FAIL  {name}: {msg}")
            print(lines[-1])
            raise
        detail = ", ".join(f"{k}={v}" for k, v in note.items())
        lines.append(f"PASS  {name}" + (f" ({detail})" if detail else ""))
        print(lines[-1])

    return check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    from dsaa.fgovd.world import WorldConfig, build_world

    return build_world(WorldConfig(), seed=7)


@pytest.fixture(scope="session")
def experiment():
    """Every ablation variant trained and scored on the default benchmark."""
    from dsaa.config import RunConfig
    from dsaa.experiment import ABLATION, Experiment

    t0 = time.perf_counter()
    exp = Experiment.build(RunConfig())
    exp.gen_seconds = time.perf_counter() - t0
    for v in ABLATION:
        exp.run(v)
    return exp
