"""Monte Carlo value estimation, the grid-refinement rate study and the improvement check."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from mfcq.errors import DivergenceError, InvariantViolation, StudyInconclusive
from mfcq.fixed_point import evaluate_policy, improved_policy
from mfcq.measure import MeasureSlice
from mfcq.model import LQModel
from mfcq.particles import SimConfig, mesh_to_count, simulate_relaxed, simulate_sampled
from mfcq.policy import GaussianPolicy

FAILURE_FRACTION = 0.01
IMPROVEMENT_TOL = 1e-9
ROUNDOFF_FLOOR = 1e-10


@dataclass
class ValueEstimate:
    estimate: float
    stderr: float
    replications: int
    breakdown: dict[str, float]
    failures: int = 0
    gap: float | None = None
    samples: np.ndarray | None = field(default=None, repr=False)


def _aggregate(per_rep: list[tuple[float, float, float]], failures: int, reference) -> ValueEstimate:
    arr = np.array(per_rep, dtype=float).reshape(-1, 3)
    totals = arr.sum(axis=1)
    n = len(totals)
    est = float(totals.mean()) if n else 0.0
    se = float(totals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    parts = arr.mean(axis=0) if n else np.zeros(3)
    breakdown = {"running": float(parts[0]), "entropy": float(parts[1]), "terminal": float(parts[2])}
    gap = None if reference is None else est - float(reference)
    return ValueEstimate(est, se, n, breakdown, failures, gap, totals)


def _run_replications(simulate, model, policy, config: SimConfig, replications: int, reference):
    if replications < 1:
        raise ValueError("replications must be positive")
    per_rep, failures = [], 0
    for r in range(replications):
        try:
            tr = simulate(model, policy, config.with_(replication=r))
        except DivergenceError:
            failures += 1
            continue
        per_rep.append((tr.running, tr.entropy, tr.terminal_mean))
    if failures:
        if failures >= FAILURE_FRACTION * replications:
            raise DivergenceError(f"{failures} of {replications} replications diverged")
        warnings.warn(f"excluded {failures} diverged replication(s) of {replications}", stacklevel=3)
    return _aggregate(per_rep, failures, reference)


def estimate_value_sampled(model: LQModel, policy: GaussianPolicy, config: SimConfig, replications: int = 50,
                           reference: float | None = None) -> ValueEstimate:
    """Average over replications of the population-average sampled-action functional."""
    return _run_replications(simulate_sampled, model, policy, config, replications, reference)


def estimate_value_relaxed(model: LQModel, policy: GaussianPolicy, config: SimConfig, replications: int = 50,
                           reference: float | None = None) -> ValueEstimate:
    return _run_replications(simulate_relaxed, model, policy, config, replications, reference)


def closed_form_value(model: LQModel, policy: GaussianPolicy, mu0: MeasureSlice | None = None, steps: int = 1000) -> float:
    mu0 = mu0 or MeasureSlice.dirac(np.zeros(model.d))
    return evaluate_policy(model, policy, steps).value(0.0, mu0)


# ------------------------------------------------------------------ rate study


@dataclass
class RateStudy:
    meshes: list[float]
    gaps: list[float]
    stderrs: list[float]
    replications: int
    N: int
    slope: float
    intercept: float
    used: list[bool]
    pair_ok: list[bool]
    inconclusive: bool
    common_random_numbers: bool
    reference: float
    pair_stderrs: list[float] = field(default_factory=list)
    probe: dict | None = None

    @property
    def monotone(self) -> bool:
        return all(self.pair_ok)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mesh", "gap", "stderr", "replications", "used_in_fit"])
            for m, g, s, u in zip(self.meshes, self.gaps, self.stderrs, self.used):
                w.writerow([repr(m), repr(g), repr(s), self.replications, int(u)])

    def report(self) -> dict:
        out = asdict(self)
        out["monotone"] = self.monotone
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2, sort_keys=True)


def fit_rate(meshes, gaps, stderrs, floor: float = 0.0) -> tuple[float, float, list[bool]]:
    """Least-squares slope of log|gap| on log(mesh), using gaps above 3 standard errors.

    Gaps at or below ``floor`` (round-off level) are never used.

    Raises ValueError with fewer than three grids and StudyInconclusive if
    fewer than two gaps are resolved.
    """
    if len(meshes) < 3:
        raise ValueError("a rate fit needs at least three grids")
    used = [bool(abs(g) > max(3.0 * s, floor)) for g, s in zip(gaps, stderrs)]
    if sum(used) < 2:
        raise StudyInconclusive("gaps are statistically indistinguishable from zero")
    x = np.log([m for m, u in zip(meshes, used) if u])
    y = np.log([abs(g) for g, u in zip(gaps, used) if u])
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept), used


def convergence_study(
    model: LQModel,
    policy: GaussianPolicy,
    grids: Sequence[float],
    config: SimConfig,
    replications: int = 100,
    reference: float | None = None,
    common_random_numbers: bool = True,
    probe_doubling: bool = False,
) -> RateStudy:
    """Gap between the sampled-action value and the relaxed closed form over action meshes.

    With common random numbers every grid reuses replication r's streams;
    increments are keyed by the simulation step, so the Brownian path is the
    same on every grid and action draws at shared nodes coincide.
    """
    meshes = sorted((float(g) for g in grids), reverse=True)
    if len(meshes) < 3:
        raise ValueError("a rate fit needs at least three grids")
    if reference is None:
        reference = closed_form_value(model, policy, config.mu0)
    per = np.empty((len(meshes), replications))
    for k, mesh in enumerate(meshes):
        seed = config.seed if common_random_numbers else config.seed + 7919 * (k + 1)
        cfg = config.with_(action_grid=mesh_to_count(model.horizon, mesh), seed=seed)
        est = estimate_value_sampled(model, policy, cfg, replications)
        if est.failures:
            raise DivergenceError("rate study does not tolerate diverged replications")
        per[k] = est.samples - reference
    gaps = per.mean(axis=1)
    ses = per.std(axis=1, ddof=1) / math.sqrt(replications)
    floor = ROUNDOFF_FLOOR * max(1.0, abs(reference))
    pair_ses, pair_ok = [], []
    for k in range(len(meshes) - 1):
        if common_random_numbers:
            # paired difference of the gap magnitudes, signed by the mean gaps
            diff = np.sign(gaps[k + 1]) * per[k + 1] - np.sign(gaps[k]) * per[k]
            se = float(diff.std(ddof=1) / math.sqrt(replications))
        else:
            se = float(math.hypot(ses[k], ses[k + 1]))
        pair_ses.append(se)
        pair_ok.append(bool(abs(gaps[k + 1]) <= abs(gaps[k]) + max(2.0 * se, floor)))
    try:
        slope, intercept, used = fit_rate(meshes, gaps, ses, floor)
        inconclusive = False
    except StudyInconclusive:
        slope, intercept, used, inconclusive = float("nan"), float("nan"), [False] * len(meshes), True
    probe = None
    if probe_doubling:
        cfg = config.with_(action_grid=mesh_to_count(model.horizon, meshes[-1]), N=2 * config.N)
        est = estimate_value_sampled(model, policy, cfg, replications, reference)
        probe = {"N": 2 * config.N, "gap": est.gap, "stderr": est.stderr,
                 "shift": est.gap - float(gaps[-1])}
    return RateStudy(
        meshes=meshes,
        gaps=[float(g) for g in gaps],
        stderrs=[float(s) for s in ses],
        replications=replications,
        N=config.N,
        slope=slope,
        intercept=intercept,
        used=used,
        pair_ok=pair_ok,
        inconclusive=inconclusive,
        common_random_numbers=common_random_numbers,
        reference=float(reference),
        pair_stderrs=pair_ses,
        probe=probe,
    )


# ------------------------------------------------------------------ improvement


@dataclass
class ImprovementReport:
    J_pi: float
    J_new: float
    gap: float
    mc_J_pi: float | None
    mc_J_new: float | None
    mc_gap: float | None
    mc_stderr: float | None
    passes: bool
    mc_consistent: bool | None

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def improvement_check(
    model: LQModel,
    policy: GaussianPolicy,
    config: SimConfig | None = None,
    replications: int = 40,
    mu0: MeasureSlice | None = None,
    steps: int = 1000,
) -> ImprovementReport:
    """Compare J(pi) and J(I(pi)) in closed form and, if ``config`` is given, by relaxed Monte Carlo.

    The two Monte Carlo runs use independent streams; the pooled standard
    error is sqrt(se_1^2 + se_2^2).
    """
    mu0 = mu0 or (config.mu0 if config is not None and config.mu0 is not None else MeasureSlice.standard(model.d))
    value = evaluate_policy(model, policy, steps)
    new = improved_policy(model, value)
    J_pi = value.value(0.0, mu0)
    J_new = evaluate_policy(model, new, steps).value(0.0, mu0)
    gap = J_new - J_pi
    if gap < -IMPROVEMENT_TOL:
        raise InvariantViolation(f"improved policy is worse in closed form: gap {gap:.3e}")
    mc = (None, None, None, None, None)
    if config is not None:
        cfg = config.with_(mu0=mu0)
        e_pi = estimate_value_relaxed(model, policy, cfg, replications)
        e_new = estimate_value_relaxed(model, new, cfg.with_(seed=cfg.seed + 104729), replications)
        se = math.hypot(e_pi.stderr, e_new.stderr)
        mc_gap = e_new.estimate - e_pi.estimate
        mc = (e_pi.estimate, e_new.estimate, mc_gap, se, bool(abs(mc_gap - gap) <= 3.0 * se))
    return ImprovementReport(J_pi, J_new, gap, *mc[:4], passes=True, mc_consistent=mc[4])
