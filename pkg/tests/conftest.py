import numpy as np
import pytest

from nodesplit import engine as en
from nodesplit import graph as gr


@pytest.fixture
def quick_cfg():
    return en.SamplerConfig(chains=2, iterations=12000, burn_in=2000, thin=2, seed=11)


@pytest.fixture
def beta_binomial():
    """y ~ Binomial(50, p), p ~ Beta(2, 3), y = 17: posterior Beta(19, 36)."""
    return gr.ModelGraph([
        gr.founder("p", "beta(2, 3)"),
        gr.observed("y", "binomial(50, p)", 17),
    ])


@pytest.fixture
def two_normals():
    """theta ~ N(0, 10); y1 ~ N(theta, 1) = 0.5; y2 ~ N(theta, 1) = 3.5."""
    return gr.ModelGraph([
        gr.founder("theta", "normal(0, 10)"),
        gr.observed("y1", "normal(theta, 1)", 0.5),
        gr.observed("y2", "normal(theta, 1)", 3.5),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Record ``(criterion, part, passed, detail)`` for the end-of-run summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, part, passed, detail):
        log.append((criterion, part, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    by = {}
    for c, part, ok, detail in log:
        by.setdefault(c, []).append((part, ok, detail))
    for c in sorted(by):
        ok = all(o for _, o, _ in by[c])
        parts = "; ".join(f"{p}: {'ok' if o else 'FAIL'} ({d})" for p, o, d in by[c])
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {parts}")
