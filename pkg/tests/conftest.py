import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfcq.model import LQModel, load_model_file  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

CRITERIA = {
    1: "Riccati closed form on M1",
    2: "Gaussian optimal policy blocks and Kbar identity",
    3: "HJB residual and test power",
    4: "Inner Gibbs fixed point on M2 / Fo=0",
    5: "Two-layer solve on M1 and M2",
    6: "Policy evaluation oracle (closed form and Monte Carlo)",
    7: "Convergence rate in the action mesh",
    8: "Policy improvement (closed form and Monte Carlo)",
    9: "Temperature limit",
    10: "Simulator, hamiltonian and policy invariants",
}


def m1_model(**kw) -> LQModel:
    base = dict(C=1.0, R=-0.5, P=-0.5)
    base.update(kw)
    return LQModel.build(1, 1, 1.0, base.pop("gamma", 1.0), name="m1", **base)


@pytest.fixture(scope="session")
def m1():
    return load_model_file(CONFIGS / "m1.yaml")


@pytest.fixture(scope="session")
def m2():
    return load_model_file(CONFIGS / "m2.yaml")


@pytest.fixture(scope="session")
def m3():
    return load_model_file(CONFIGS / "m3.yaml")


@pytest.fixture(scope="session")
def m1_solution(m1):
    from mfcq.riccati import solve_backward

    return solve_backward(m1, 1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    ok = call.excinfo is None
    item.config._criteria.setdefault(n, []).append((item.name, ok))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in results:
            continue
        runs = results[n]
        status = "PASS" if all(ok for _, ok in runs) else "FAIL"
        failed = [name for name, ok in runs if not ok]
        extra = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n:>2} {status}: {CRITERIA[n]} [{len(runs)} checks]{extra}")
