"""Gibbs map, inner damped fixed point, Gaussian policy evaluation and the two-layer driver."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mfcq._linalg import negdef_inverse, sym
from mfcq.errors import DefinitenessError, DegenerateMapError, SingularityError
from mfcq.hamiltonian import (
    ValueDerivativeBundle,
    integrated_hamiltonian,
    variational_derivative_grid,
)
from mfcq.measure import DEFAULT_ORDER, MeasureSlice
from mfcq.model import LQModel, coefficients_at
from mfcq.policy import GaussianPolicy, TabularPolicy, action_grid
from mfcq.riccati import QuadraticValue, _blocks, rk4_backward

LOG_2PI_E = math.log(2.0 * math.pi) + 1.0


@dataclass
class FixedPointTrace:
    kind: str  # "inner" or "outer"
    tol: float
    damping: float = 1.0
    changes: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    block_deltas: list[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.changes)

    def to_csv(self, path) -> None:
        keys = sorted({k for row in self.block_deltas for k in row})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "change", "value", *keys])
            for i, ch in enumerate(self.changes):
                val = self.values[i] if i < len(self.values) else ""
                deltas = self.block_deltas[i] if i < len(self.block_deltas) else {}
                w.writerow([i + 1, repr(ch), repr(val) if val != "" else "", *[repr(deltas.get(k, "")) for k in keys]])


# ------------------------------------------------------------------ inner layer


def gibbs_map(
    model: LQModel, t: float, mu: MeasureSlice, h: TabularPolicy, bundle: ValueDerivativeBundle, order: int = DEFAULT_ORDER
) -> TabularPolicy:
    """Density proportional to exp(delta H / delta h / gamma), normalized per state node."""
    expo = variational_derivative_grid(model, t, mu, h, bundle, h.state_nodes, h.action_nodes, order) / model.gamma
    top = expo.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateMapError(f"Gibbs exponent has no finite cell at t={t:.6g}")
    rho = np.exp(expo - top)
    mass = rho.sum(axis=1, keepdims=True) * h.cell_volume
    if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
        raise DegenerateMapError(f"Gibbs density underflowed at t={t:.6g}")
    return TabularPolicy(h.state_nodes, h.action_nodes, h.cell_volume, rho / mass, t, mu)


def inner_fixed_point(
    model: LQModel,
    t: float,
    mu: MeasureSlice,
    bundle: ValueDerivativeBundle,
    h0: TabularPolicy,
    damping: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 200,
    order: int = DEFAULT_ORDER,
    track_value: bool = False,
) -> tuple[TabularPolicy, FixedPointTrace]:
    """Iterate h <- (1 - theta) h + theta Phi(h) until sup|Phi(h) - h| <= tol.

    Each recorded change is the fixed-point residual after the update. When
    Fo vanishes at ``t`` the map does not depend on h, so one undamped step
    lands on the fixed point.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    trace = FixedPointTrace("inner", tol, damping)
    constant_map = not np.any(coefficients_at(model, t).Fo)
    h = h0
    phi = gibbs_map(model, t, mu, h, bundle, order)
    for _ in range(max_iter):
        theta = 1.0 if constant_map else damping
        h = h.mix(phi, theta) if theta < 1.0 else phi
        phi = gibbs_map(model, t, mu, h, bundle, order)
        trace.changes.append(float(np.max(np.abs(phi.density - h.density))))
        if track_value:
            trace.values.append(integrated_hamiltonian(model, t, mu, h, bundle, regularized=True, order=order))
        if trace.changes[-1] <= tol:
            trace.converged = True
            break
    return h, trace


def tabular_grid_for(policy: GaussianPolicy, t: float, mu: MeasureSlice, cells: int = 257, radius: float = 6.0,
                     order: int = DEFAULT_ORDER):
    """State nodes (the measure's quadrature nodes) and an action box covering the Gaussian at every node."""
    X, _ = mu.nodes(order)
    means = policy.mean(t, X, mu.mean)
    std = np.sqrt(np.diag(policy.blocks(t)[3]))
    lo, hi = means.min(axis=0), means.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) / radius
    A, w = action_grid(center, std + half, cells, radius)
    return X, A, w


# ------------------------------------------------------------------ policy evaluation


@dataclass(frozen=True)
class PolicyValueSolution(QuadraticValue):
    pass


def _lyapunov_rhs(gamma: float):
    def rhs(item, t, Lam, Gam, zeta, chi):
        c, (K, Kbar, K0, Sigma) = item
        A1 = c.B + c.C @ K
        A2 = c.B + c.Bbar + c.C @ Kbar
        c0 = c.b0 + c.C @ K0
        G1 = c.D + c.F @ K
        G2 = c.D + c.Dbar + c.F @ Kbar
        g0 = c.theta + c.F @ K0
        H1 = c.Do + c.Fo @ K
        H2 = c.Do + c.Dbar_o + c.Fo @ Kbar
        ho = c.theta_o + c.Fo @ K0
        U = c.F.T @ Lam @ c.F + c.Fo.T @ Lam @ c.Fo + c.R
        p = len(Sigma)
        _, logdet = np.linalg.slogdet(Sigma)
        dLam = -(A1.T @ Lam + Lam @ A1 + G1.T @ Lam @ G1 + H1.T @ Lam @ H1 + c.M + K.T @ c.R @ K)
        dGam = -(A2.T @ Gam + Gam @ A2 + G2.T @ Lam @ G2 + H2.T @ Gam @ H2 + c.M + c.Mbar + Kbar.T @ c.R @ Kbar)
        dzeta = -(
            A2.T @ zeta
            + 2.0 * Gam @ c0
            + 2.0 * G2.T @ Lam @ g0
            + 2.0 * H2.T @ Gam @ ho
            + c.O
            + 2.0 * Kbar.T @ c.R @ K0
        )
        dchi = -(
            c0 @ zeta
            + g0 @ Lam @ g0
            + ho @ Gam @ ho
            + K0 @ c.R @ K0
            + np.trace(U @ Sigma)
            + 0.5 * gamma * (p * LOG_2PI_E + logdet)
        )
        return sym(dLam), sym(dGam), dzeta, float(dchi)

    return rhs


def evaluate_policy(model: LQModel, policy: GaussianPolicy, steps: int = 1000) -> PolicyValueSolution:
    """Quadratic coefficients of J(.; policy) from the linear (Lyapunov) ODEs, integrated by RK4."""
    half = np.linspace(0.0, model.horizon, 2 * steps + 1)
    slices = model.slices_on(half)
    K, Kbar, K0, Sigma = policy.blocks_on(half)
    items = [(slices[j], (K[j], Kbar[j], K0[j], Sigma[j])) for j in range(len(half))]
    d = model.d
    terminal = (model.P.copy(), model.P + model.Pbar, np.zeros(d), np.array(0.0))
    (Lam, Gam, zeta, chi), (dL, dG, dz, dc) = rk4_backward(_lyapunov_rhs(model.gamma), terminal, model.horizon, steps, items)
    Lam[-1], Gam[-1] = model.P, model.P + model.Pbar
    zeta[-1], chi[-1] = 0.0, 0.0
    return PolicyValueSolution(
        times=np.linspace(0.0, model.horizon, steps + 1),
        Lambda=Lam, Gamma=Gam, zeta=zeta, chi=chi,
        dLambda=dL, dGamma=dG, dzeta=dz, dchi=dc,
        steps=steps, method="rk4-lyapunov",
    )


# ------------------------------------------------------------------ outer layer


def improved_policy(model: LQModel, value: QuadraticValue) -> GaussianPolicy:
    """Closed-form Gibbs maximizer for a quadratic value, node by node."""
    n = len(value.times)
    d, p = model.d, model.p
    K = np.empty((n, p, d))
    Kbar = np.empty((n, p, d))
    K0 = np.empty((n, p))
    Sigma = np.empty((n, p, p))
    for k, c in enumerate(model.slices_on(value.times)):
        t = float(value.times[k])
        blk = _blocks(c, value.Lambda[k], value.Gamma[k], value.zeta[k])
        try:
            Uinv, _, negU = negdef_inverse(blk.U, "U", t)
            Vinv, _, _ = negdef_inverse(blk.V, "V", t)
        except SingularityError as exc:
            raise DefinitenessError(f"{exc}; try damping the outer step or re-check condition (H)") from None
        if not negU:
            raise DefinitenessError(
                f"U is not negative definite at t={t:.6g}; try damping the outer step or re-check condition (H)"
            )
        K[k] = -Uinv @ blk.S
        Kbar[k] = -Vinv @ blk.Z
        K0[k] = -0.5 * Vinv @ blk.Y
        Sigma[k] = sym(-0.5 * model.gamma * Uinv)
    return GaussianPolicy(value.times.copy(), K, Kbar, K0, Sigma)


@dataclass
class OuterStep:
    policy: GaussianPolicy
    value: PolicyValueSolution
    spot_errors: list[float] = field(default_factory=list)

    def __iter__(self):
        yield self.policy
        yield self.value


def outer_iterate(
    model: LQModel,
    policy: GaussianPolicy,
    steps: int = 1000,
    spot_checks=(),
    cells: int = 257,
    damping: float = 0.5,
    order: int = DEFAULT_ORDER,
) -> OuterStep:
    """Evaluate ``policy`` and return the improved Gaussian policy.

    ``spot_checks`` is a sequence of ``(t, MeasureSlice)``; at each the
    tabular inner fixed point is run and its sup density error against the
    closed-form improved policy is recorded.
    """
    value = evaluate_policy(model, policy, steps)
    new = improved_policy(model, value)
    step = OuterStep(new, value)
    if spot_checks:
        bundle = ValueDerivativeBundle.from_quadratic(value)
        for t, mu in spot_checks:
            step.spot_errors.append(spot_check(model, t, mu, policy, new, bundle, cells, damping, order))
    return step


def spot_check(model, t, mu, old: GaussianPolicy, new: GaussianPolicy, bundle, cells=257, damping=0.5,
               order: int = DEFAULT_ORDER) -> float:
    """Sup density error between the tabular inner fixed point and the closed-form Gaussian."""
    X, A, w = tabular_grid_for(new, t, mu, cells, order=order)
    h0 = TabularPolicy.from_gaussian(old, t, X, mu.mean, A, w, mu)
    h, _ = inner_fixed_point(model, t, mu, bundle, h0, damping=damping, order=order)
    ref = TabularPolicy.from_gaussian(new, t, X, mu.mean, A, w, mu)
    return float(np.max(np.abs(h.density - ref.density)))


def policy_block_difference(a: GaussianPolicy, b: GaussianPolicy) -> float:
    times = np.union1d(a.times, b.times)
    ba, bb = a.blocks_on(times), b.blocks_on(times)
    return max(float(np.max(np.abs(x - y))) for x, y in zip(ba, bb))


def two_layer_solve(
    model: LQModel,
    policy0: GaussianPolicy,
    tol: float = 1e-10,
    max_outer: int = 50,
    steps: int = 1000,
    mu_ref: MeasureSlice | None = None,
) -> tuple[GaussianPolicy, FixedPointTrace]:
    """Repeat evaluate-and-improve until the value coefficients stop moving.

    The trace records, per outer step, the max change of (Lambda, Gamma,
    zeta, chi) and J(0, mu_ref; pi^n) for the policy that was evaluated.
    """
    mu_ref = mu_ref or MeasureSlice.standard(model.d)
    trace = FixedPointTrace("outer", tol)
    policy = policy0
    prev = None
    for _ in range(max_outer):
        new, value = outer_iterate(model, policy, steps)
        trace.values.append(value.value(0.0, mu_ref))
        if prev is None:
            change = math.inf
            deltas = {}
        else:
            deltas = {f: float(np.max(np.abs(getattr(value, f) - getattr(prev, f)))) for f in ("Lambda", "Gamma", "zeta", "chi")}
            change = max(deltas.values())
        deltas["policy"] = policy_block_difference(policy, new)
        trace.changes.append(change)
        trace.block_deltas.append(deltas)
        policy, prev = new, value
        if change <= tol:
            trace.converged = True
            break
    return policy, trace
