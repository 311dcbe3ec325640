import csv
import json
import math

import numpy as np
import pytest

from oracles import discrete_moment_value
from mfcq import mc_eval
from mfcq.errors import DivergenceError, InvariantViolation, StudyInconclusive
from mfcq.fixed_point import evaluate_policy
from mfcq.mc_eval import (
    closed_form_value,
    convergence_study,
    estimate_value_relaxed,
    estimate_value_sampled,
    fit_rate,
    improvement_check,
)
from mfcq.measure import MeasureSlice
from mfcq.model import LQModel
from mfcq.particles import SimConfig, action_step_mask
from mfcq.policy import GaussianPolicy
from mfcq.riccati import optimal_policy

DIRAC = MeasureSlice.dirac([0.0])
STD = MeasureSlice.standard(1)
ENT_1 = 0.5 * math.log(2 * math.pi * math.e)


@pytest.fixture(scope="module")
def pistar(m1, m1_solution):
    return optimal_policy(m1_solution, m1)


@pytest.fixture(scope="module")
def pistar_estimates(m1, pistar):
    out = {}
    for name, mu0 in (("dirac", DIRAC), ("std", STD)):
        cfg = SimConfig(N=10_000, dt_sim=0.01, action_grid=100, mu0=mu0)
        out[name] = (cfg, estimate_value_sampled(m1, pistar, cfg, 50))
    return out


def test_zero_reward_model():
    # gamma must be positive; Sigma = 1/(2 pi e) makes the entropy bonus vanish instead
    m = LQModel.build(1, 1, 1.0, 1.0, R=0.0)
    pol = GaussianPolicy.constant(1.0, 0.3, 0.1, 0.0, 1.0 / (2 * math.pi * math.e))
    est = estimate_value_sampled(m, pol, SimConfig(N=100, dt_sim=0.1, mu0=STD), 5)
    assert abs(est.estimate) < 1e-15 and est.stderr < 1e-15
    assert est.breakdown["running"] == 0.0 and est.breakdown["terminal"] == 0.0


@pytest.mark.xfail(strict=True, reason="O(|D|) discretization bias of -0.0035 is about 37 standard errors")
def test_pistar_dirac_matches_closed_form(pistar_estimates):
    est = pistar_estimates["dirac"][1]
    assert abs(est.estimate - 0.5 * math.log(2 * math.pi)) <= 3 * est.stderr


@pytest.mark.xfail(strict=True, reason="O(|D|) discretization bias of -0.0035 is about 6 standard errors")
def test_pistar_gaussian_matches_closed_form(pistar_estimates):
    est = pistar_estimates["std"][1]
    assert abs(est.estimate - 0.668939) <= 3 * est.stderr


@pytest.mark.parametrize("name,mu0", [("dirac", DIRAC), ("std", STD)])
def test_pistar_matches_discrete_oracle(m1, pistar, pistar_estimates, name, mu0):
    cfg, est = pistar_estimates[name]
    oracle = discrete_moment_value(m1, pistar, mu0, 0.01, action_step_mask(m1, cfg))["value"]
    assert abs(est.estimate - oracle) <= 3 * est.stderr
    # the bias itself is the Euler error of the exact scheme, not Monte Carlo noise
    assert oracle - closed_form_value(m1, pistar, mu0) == pytest.approx(-0.00348, abs=2e-5)


def test_breakdown_and_entropy(pistar_estimates):
    est = pistar_estimates["dirac"][1]
    assert sum(est.breakdown.values()) == pytest.approx(est.estimate, abs=1e-12)
    assert est.breakdown["entropy"] == pytest.approx(ENT_1 * 1.0, abs=1e-12)
    assert est.stderr == pytest.approx(est.samples.std(ddof=1) / math.sqrt(50))


def test_stderr_scaling(m1, pistar):
    cfg = SimConfig(N=200, dt_sim=0.05, mu0=STD, seed=1)
    se = {n: estimate_value_sampled(m1, pistar, cfg, n).stderr for n in (100, 200, 400)}
    assert se[200] / se[100] == pytest.approx(1 / math.sqrt(2), rel=0.2)
    assert se[400] / se[100] == pytest.approx(0.5, rel=0.2)


def test_relaxed_matches_oracle(m3):
    pol = GaussianPolicy.constant(1.0, -0.3, -0.2, 0.1, 0.5)
    cfg = SimConfig(N=2000, dt_sim=0.02, mu0=STD, seed=4)
    est = estimate_value_relaxed(m3, pol, cfg, 40)
    oracle = discrete_moment_value(m3, pol, STD, 0.02, relaxed=True)["value"]
    assert abs(est.estimate - oracle) <= 3 * est.stderr + 2e-3


def test_reference_gap(m1, pistar):
    est = estimate_value_sampled(m1, pistar, SimConfig(N=50, dt_sim=0.1), 3, reference=1.0)
    assert est.gap == pytest.approx(est.estimate - 1.0)


def test_failure_policy(m1, pistar, monkeypatch):
    real = mc_eval.simulate_sampled
    cfg = SimConfig(N=10, dt_sim=0.1)

    def flaky(bad):
        def sim(model, policy, config):
            if config.replication in bad:
                raise DivergenceError("boom", step=1)
            return real(model, policy, config)
        return sim

    with pytest.warns(UserWarning, match="excluded 1"):
        est = mc_eval._run_replications(flaky({3}), m1, pistar, cfg, 200, None)
    assert est.failures == 1 and est.replications == 199
    with pytest.raises(DivergenceError):
        mc_eval._run_replications(flaky({1, 2}), m1, pistar, cfg, 200, None)


def test_crn_reduces_variance(m1, pistar):
    pol = pistar.with_blocks(Sigma=4.0 * pistar.Sigma)
    cfg = SimConfig(N=500, dt_sim=0.025, mu0=DIRAC, seed=0)
    coarse = estimate_value_sampled(m1, pol, cfg.with_(action_grid=10), 60).samples
    fine_crn = estimate_value_sampled(m1, pol, cfg.with_(action_grid=20), 60).samples
    fine_ind = estimate_value_sampled(m1, pol, cfg.with_(action_grid=20, seed=99), 60).samples
    assert np.var(fine_crn - coarse) < np.var(fine_ind - coarse)


def test_fit_rate_rules():
    with pytest.raises(ValueError):
        fit_rate([0.1], [0.1], [0.001])
    with pytest.raises(ValueError):
        fit_rate([0.2, 0.1], [0.1, 0.05], [0.001, 0.001])
    with pytest.raises(StudyInconclusive):
        fit_rate([0.2, 0.1, 0.05], [1e-3, 1e-4, 1e-5], [1e-3, 1e-3, 1e-3])
    slope, _, used = fit_rate([0.2, 0.1, 0.05, 0.025], [0.4, 0.2, 0.1, 1e-4], [1e-3] * 4)
    assert slope == pytest.approx(1.0) and used == [True, True, True, False]
    # round-off level gaps never count, whatever their standard error
    with pytest.raises(StudyInconclusive):
        fit_rate([0.2, 0.1, 0.05], [1e-13, 2e-13, 1e-13], [0.0, 0.0, 0.0], floor=1e-10)


def test_convergence_study_single_grid(m1, pistar):
    with pytest.raises(ValueError):
        convergence_study(m1, pistar, [0.1], SimConfig(N=10))


def test_convergence_study_inconclusive(m1, pistar):
    # relaxed and sampled dynamics coincide when the action variance is negligible
    pol = pistar.with_blocks(Sigma=1e-24 * pistar.Sigma)
    cfg = SimConfig(N=200, dt_sim=0.05, mu0=DIRAC)
    study = convergence_study(m1, pol, [0.2, 0.1, 0.05], cfg, 10)
    assert study.inconclusive and math.isnan(study.slope)


def test_convergence_study_outputs(tmp_path, m1, pistar):
    pol = pistar.with_blocks(Sigma=4.0 * pistar.Sigma)
    cfg = SimConfig(N=1000, dt_sim=0.025, mu0=DIRAC)
    study = convergence_study(m1, pol, [0.2, 0.1, 0.05, 0.025], cfg, 20, probe_doubling=True)
    assert not study.inconclusive and study.slope > 0.4 and study.monotone
    assert study.probe["N"] == 2000
    study.to_csv(tmp_path / "s.csv")
    study.to_json(tmp_path / "s.json")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["mesh", "gap", "stderr", "replications", "used_in_fit"] and len(rows) == 5
    rep = json.load(open(tmp_path / "s.json"))
    assert rep["monotone"] is True and rep["N"] == 1000


def test_improvement_at_optimum(m1, pistar):
    rep = improvement_check(m1, pistar, mu0=STD)
    assert abs(rep.gap) < 1e-9 and rep.passes and rep.mc_gap is None


def test_improvement_perturbed_k(m1, pistar):
    rep = improvement_check(m1, pistar.with_blocks(K=pistar.K + 0.2), mu0=STD)
    assert rep.gap > 1e-4


def test_improvement_random_perturbations_m2(m2):
    from mfcq.riccati import solve_backward

    pi = optimal_policy(solve_backward(m2, 500), m2)
    rng = np.random.default_rng(7)
    for _ in range(5):
        e = rng.normal(0.0, 0.2, 3)
        rep = improvement_check(m2, pi.with_blocks(K=pi.K + e[0], Kbar=pi.Kbar + e[1], K0=pi.K0 + e[2]), steps=500)
        assert rep.gap >= -1e-9


def test_improvement_invariant_violation(m1, pistar, monkeypatch):
    worse = pistar.with_blocks(K=pistar.K + 1.0)
    monkeypatch.setattr(mc_eval, "improved_policy", lambda model, value: worse)
    with pytest.raises(InvariantViolation):
        improvement_check(m1, pistar, mu0=STD, steps=200)


def test_closed_form_value_defaults(m1, pistar):
    assert closed_form_value(m1, pistar) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-9)
    assert closed_form_value(m1, pistar, STD) == pytest.approx(0.668939, abs=1e-6)
    assert evaluate_policy(m1, pistar).value(0.0, STD) == pytest.approx(closed_form_value(m1, pistar, STD))
