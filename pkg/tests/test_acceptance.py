"""Acceptance criteria 1-10, one or more checks per criterion.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary prints one PASS/FAIL line per criterion.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CONFIGS, m1_model
from mfcq.cli import main as cli_main
from mfcq.fixed_point import (
    evaluate_policy,
    inner_fixed_point,
    policy_block_difference,
    tabular_grid_for,
    two_layer_solve,
)
from mfcq.hamiltonian import ValueDerivativeBundle, hjb_residual, integrated_hamiltonian, variational_derivative_grid
from mfcq.mc_eval import closed_form_value, convergence_study, estimate_value_sampled, improvement_check
from mfcq.measure import MeasureSlice
from mfcq.model import LQModel
from mfcq.particles import SimConfig, simulate_sampled
from mfcq.policy import GaussianPolicy, TabularPolicy, action_grid, density
from mfcq.riccati import kbar_identity_residual, optimal_policy, solve_backward

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
STD = MeasureSlice.standard(1)
DIRAC = MeasureSlice.dirac([0.0])


def zero_policy():
    return GaussianPolicy.constant(1.0, 0.0, 0.0, 0.0, 1.0)


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1)
def test_c1_riccati_closed_form(m1):
    t0 = time.perf_counter()
    sol = solve_backward(m1, 1000)
    elapsed = time.perf_counter() - t0
    Lam, Gam, _, chi = sol.at(0.0)
    assert abs(Lam[0, 0] + 0.25) <= 1e-6
    assert abs(Gam[0, 0] + 0.25) <= 1e-6
    assert np.max(np.abs(sol.zeta)) <= 1e-9
    assert abs(chi - HALF_LOG_2PI) <= 1e-6
    assert elapsed < 1.0


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2)
def test_c2_policy_blocks_m1(m1, m1_solution):
    K, Kbar, K0, Sigma = optimal_policy(m1_solution, m1).blocks(0.0)
    assert np.allclose([K[0, 0], Kbar[0, 0], K0[0], Sigma[0, 0]], [-0.5, -0.5, 0.0, 1.0], atol=1e-6, rtol=0)


@pytest.mark.criterion(2)
@pytest.mark.parametrize("name", ["m1", "m2", "m3"])
def test_c2_spd_and_kbar_identity(name, request):
    m = request.getfixturevalue(name)
    sol = solve_backward(m, 1000)
    pol = optimal_policy(sol, m)
    assert np.all(np.linalg.eigvalsh(pol.Sigma) > 0)
    assert np.array_equal(pol.Sigma, np.swapaxes(pol.Sigma, 1, 2))
    assert kbar_identity_residual(sol, pol, m) <= 1e-10
    worst = max(float(np.max(np.abs(sol.V[k] @ pol.Kbar[k] + sol.Z[k]))) for k in range(len(sol.times)))
    assert worst <= 1e-10


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3)
@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_c3_hjb_residual(m1, m1_solution, t):
    assert abs(hjb_residual(m1, t, STD, m1_solution, order=20)) <= 1e-6


@pytest.mark.criterion(3)
@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_c3_residual_has_power(m1, m1_solution, t):
    assert abs(hjb_residual(m1, t, STD, m1_solution.shifted(m1, dLambda=0.1), order=20)) > 0.01


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4)
def test_c4_inner_fixed_point_m2(m2):
    t0 = time.perf_counter()
    sol = solve_backward(m2, 1000)
    pi = optimal_policy(sol, m2)
    bundle = ValueDerivativeBundle.from_quadratic(sol)
    X, A, w = tabular_grid_for(pi, 0.0, STD, 257)
    h0 = TabularPolicy.uniform(X, A, w, 0.0, STD)
    h, trace = inner_fixed_point(m2, 0.0, STD, bundle, h0, damping=0.5, max_iter=200)
    elapsed = time.perf_counter() - t0
    assert trace.converged and trace.iterations <= 200
    ref = TabularPolicy.from_gaussian(pi, 0.0, X, STD.mean, A, w, STD)
    assert np.max(np.abs(h.density - ref.density)) <= 2e-2
    assert elapsed < 10.0


@pytest.mark.criterion(4)
def test_c4_constant_map_one_iteration(m1, m1_solution):
    pi = optimal_policy(m1_solution, m1)
    bundle = ValueDerivativeBundle.from_quadratic(m1_solution)
    X, A, w = tabular_grid_for(pi, 0.0, STD, 257)
    _, trace = inner_fixed_point(m1, 0.0, STD, bundle, TabularPolicy.uniform(X, A, w), damping=1.0)
    assert trace.converged and trace.iterations == 1


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5)
@pytest.mark.parametrize("name", ["m1", "m2"])
def test_c5_two_layer(name, request):
    m = request.getfixturevalue(name)
    t0 = time.perf_counter()
    pol, trace = two_layer_solve(m, zero_policy(), max_outer=50, mu_ref=STD)
    elapsed = time.perf_counter() - t0
    target = optimal_policy(solve_backward(m, 1000), m)
    assert trace.converged and trace.iterations <= 50
    assert policy_block_difference(pol, target) <= 1e-6
    assert np.all(np.diff(trace.values) >= -1e-9)
    assert elapsed < 30.0


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6)
def test_c6_evaluation_reproduces_riccati(m1, m1_solution):
    value = evaluate_policy(m1, optimal_policy(m1_solution, m1), 1000)
    assert value.max_block_difference(m1_solution) <= 1e-8


@pytest.mark.criterion(6)
def test_c6_monte_carlo_suboptimal(m1):
    t0 = time.perf_counter()
    pol = GaussianPolicy.constant(1.0, -0.3, -0.3, 0.1, 0.05)
    closed = closed_form_value(m1, pol, STD)
    cfg = SimConfig(N=10_000, dt_sim=0.01, action_grid=100, seed=0, mu0=STD)
    est = estimate_value_sampled(m1, pol, cfg, 50, reference=closed)
    elapsed = time.perf_counter() - t0
    assert abs(est.gap) <= 3 * est.stderr
    assert elapsed < 120.0


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7)
def test_c7_convergence_rate(m1, m1_solution):
    t0 = time.perf_counter()
    pi = optimal_policy(m1_solution, m1)
    pol = pi.with_blocks(Sigma=4.0 * pi.Sigma)
    cfg = SimConfig(N=10_000, dt_sim=0.025, seed=0, mu0=DIRAC)
    study = convergence_study(m1, pol, [0.2, 0.1, 0.05, 0.025], cfg, replications=100, common_random_numbers=True)
    elapsed = time.perf_counter() - t0
    print(f"\nslope {study.slope:.3f} gaps {study.gaps} stderrs {study.stderrs}")
    assert not study.inconclusive
    assert study.slope >= 0.4
    assert study.monotone
    assert elapsed < 600.0


# ------------------------------------------------------------------ 8


def _perturbations(pi, n=5, seed=7, scale=0.2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        e = rng.normal(0.0, scale, 3)
        out.append(pi.with_blocks(K=pi.K + e[0], Kbar=pi.Kbar + e[1], K0=pi.K0 + e[2]))
    return out


@pytest.mark.criterion(8)
@pytest.mark.parametrize("name", ["m1", "m2"])
@pytest.mark.parametrize("k", range(5))
def test_c8_improvement(name, k, request):
    m = request.getfixturevalue(name)
    pi = optimal_policy(solve_backward(m, 1000), m)
    pol = _perturbations(pi)[k]
    cfg = SimConfig(N=5000, dt_sim=0.01, seed=100 + k, mu0=STD)
    rep = improvement_check(m, pol, cfg, replications=40, mu0=STD)
    assert rep.gap >= -1e-9
    assert abs(rep.mc_gap - rep.gap) <= 3 * rep.mc_stderr


@pytest.mark.criterion(8)
@pytest.mark.parametrize("name", ["m1", "m2"])
def test_c8_optimum_is_fixed(name, request):
    m = request.getfixturevalue(name)
    pi = optimal_policy(solve_backward(m, 1000), m)
    rep = improvement_check(m, pi, mu0=STD)
    assert abs(rep.gap) <= 1e-9


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9)
def test_c9_temperature_limit():
    pols = {}
    for g in (1.0, 0.1, 0.01):
        m = m1_model(gamma=g)
        pols[g] = optimal_policy(solve_backward(m, 1000), m)
    base = pols[1.0]
    for g, pol in pols.items():
        assert np.max(np.abs(pol.Sigma / g - base.Sigma)) <= 1e-8
        for a, b in ((pol.K, base.K), (pol.Kbar, base.Kbar), (pol.K0, base.K0)):
            assert np.max(np.abs(a - b)) <= 1e-8


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10)
def test_c10_manifest_determinism(tmp_path):
    out, replay = tmp_path / "run", tmp_path / "replay"
    args = ["simulate", "--model", str(CONFIGS / "m3.yaml"), "--N", "1000", "--seed", "5", "--mu0-cov", "1",
            "--action-grid", "20", "--out", str(out)]
    assert cli_main(args) == 0
    assert cli_main(["--from-manifest", str(out / "manifest.json"), "--replay-out", str(replay)]) == 0
    for name in json.loads((out / "manifest.json").read_text())["outputs"]:
        assert (out / name).read_bytes() == (replay / name).read_bytes()


@pytest.mark.criterion(10)
def test_c10_common_noise_sharing():
    m = LQModel.build(1, 1, 1.0, 1.0, R=-1.0, theta_o=0.8)
    tr = simulate_sampled(m, zero_policy(), SimConfig(N=300, dt_sim=0.01, seed=2, keep_states=True))
    assert all(np.all(s == s[0]) for s in tr.states)


@pytest.mark.criterion(10)
@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.2, 2.0))
def test_c10_hamiltonian_affine_without_fo(lam, shift, spread):
    m = m1_model()
    sol = solve_backward(m, 50)
    bundle = ValueDerivativeBundle.from_quadratic(sol)
    mu = MeasureSlice.gaussian([shift], [[spread]])
    X, _ = mu.nodes(8)
    A, w = action_grid(0.0, 2.0, 101)
    h1 = TabularPolicy.from_gaussian(optimal_policy(sol, m), 0.0, X, mu.mean, A, w)
    h2 = TabularPolicy.from_log_density(X, A, w, -0.5 * (A[None, :, 0] - shift - 0.3 * X) ** 2 / spread)
    H = lambda h: integrated_hamiltonian(m, 0.0, mu, h, bundle, order=8)  # noqa: E731
    assert H(h1.mix(h2, 1.0 - lam)) == pytest.approx(lam * H(h1) + (1 - lam) * H(h2), abs=1e-10)


@pytest.mark.criterion(10)
@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
def test_c10_derivative_consistency(t, shift):
    m = LQModel.build(1, 1, 1.0, 1.0, B=0.2, C=1.0, theta=0.3, F=0.3, Fo=0.5, R=-0.5, P=-0.5, Pbar=-0.5)
    sol = solve_backward(m, 50)
    bundle = ValueDerivativeBundle.from_quadratic(sol)
    mu = MeasureSlice.gaussian([shift], [[0.7]])
    X, wx = mu.nodes(8)
    A, w = action_grid(0.0, 2.0, 101)
    h = TabularPolicy.from_gaussian(optimal_policy(sol, m), t, X, mu.mean, A, w)
    h_new = TabularPolicy.from_log_density(X, A, w, -0.5 * (A[None, :, 0] - shift - 0.2 * X) ** 2 / 0.5)
    nodes, weights = np.polynomial.legendre.leggauss(5)
    integral = 0.0
    for lam, wt in zip(0.5 * (nodes + 1.0), 0.5 * weights):
        vd = variational_derivative_grid(m, t, mu, h.mix(h_new, lam), bundle, X, A, order=8)
        integral += wt * float(wx @ np.sum(vd * (h_new.density - h.density), axis=1) * w)
    diff = integrated_hamiltonian(m, t, mu, h_new, bundle, order=8) - integrated_hamiltonian(m, t, mu, h, bundle, order=8)
    assert integral == pytest.approx(diff, abs=1e-9)


@pytest.mark.criterion(10)
@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 5.0), st.floats(-3, 3))
def test_c10_policy_density_normalized(k, k0, sigma, x):
    pol = GaussianPolicy.constant(1.0, k, 0.0, k0, sigma)
    mean = pol.mean(0.0, np.array([x]), np.zeros(1))
    A, w = action_grid(mean, math.sqrt(sigma), nodes=257, radius=6.0)
    mass = sum(density(pol, 0.0, x, 0.0, a) for a in A) * w
    assert 0.999 <= mass <= 1.001


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
