import os
import subprocess
import sys

import numpy as np
import pytest

import mfcq.particles as particles
from mfcq import kernels
from mfcq.measure import MeasureSlice
from mfcq.model import LQModel
from mfcq.policy import GaussianPolicy

compiled = pytest.importorskip("mfcq._kernels")


def _args(rng, N, d, p, extra):
    mat = lambda r, c: rng.standard_normal((r, c))  # noqa: E731
    vec = lambda r: rng.standard_normal(r)  # noqa: E731
    X = rng.standard_normal((N, d))
    A = rng.standard_normal((N, p))
    ex = rng.standard_normal((N, d)) if extra else None
    return (X, A, rng.standard_normal(N), 0.3, ex, vec(d), mat(d, d), mat(d, p), vec(d), mat(d, d), mat(d, p),
            vec(d), mat(d, d), mat(d, p), mat(d, d), mat(p, p), vec(d), 0.7, 0.01)


@pytest.mark.parametrize("d,p,extra", [(1, 1, False), (1, 1, True), (2, 3, False), (3, 2, True)])
def test_euler_step_backends_agree(d, p, extra):
    args = _args(np.random.default_rng(d * 10 + p), 257, d, p, extra)
    r_py, r_cy = np.zeros(257), np.zeros(257)
    x_py = kernels.get_backend("python").lq_euler_step(*args, r_py)
    x_cy = compiled.lq_euler_step(*args, r_cy)
    assert np.allclose(x_py, x_cy, rtol=1e-13, atol=1e-13)
    assert np.allclose(r_py, r_cy, rtol=1e-13, atol=1e-13)


def test_action_backends_agree():
    rng = np.random.default_rng(0)
    X, Z = rng.standard_normal((100, 2)), rng.standard_normal((100, 3))
    K, shift, L = rng.standard_normal((3, 2)), rng.standard_normal(3), np.tril(rng.standard_normal((3, 3)))
    a = kernels.get_backend("python").gaussian_actions(X, Z, K, shift, L)
    b = compiled.gaussian_actions(X, Z, K, shift, L)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


def test_full_replication_backends_agree(monkeypatch, m3):
    pol = GaussianPolicy.constant(1.0, -0.3, -0.2, 0.1, 0.5)
    cfg = particles.SimConfig(N=500, dt_sim=0.01, action_grid=20, seed=3, mu0=MeasureSlice.standard(1))
    out = {}
    for name in ("python", "compiled"):
        be = kernels.get_backend(name)
        monkeypatch.setattr(kernels, "lq_euler_step", be.lq_euler_step)
        monkeypatch.setattr(kernels, "gaussian_actions", be.gaussian_actions)
        out[name] = particles.simulate_sampled(m3, pol, cfg)
    assert np.allclose(out["python"].final.X, out["compiled"].final.X, rtol=1e-12, atol=1e-12)
    assert out["python"].value == pytest.approx(out["compiled"].value, abs=1e-12)


def test_env_var_forces_fallback():
    env = dict(os.environ, MFCQ_PURE_PYTHON="1")
    res = subprocess.run([sys.executable, "-c", "import mfcq.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert res.stdout.strip() == "python"
    if os.environ.get("MFCQ_PURE_PYTHON", "") in ("", "0"):
        assert kernels.BACKEND == "compiled"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
