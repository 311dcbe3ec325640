"""Backward Riccati system for the LQ problem and the optimal Gaussian policy.

The value function has the quadratic form

    J(t, mu) = Tr(Lambda(t) cov(mu)) + mubar' Gamma(t) mubar + mubar' zeta(t) + chi(t)

and (Lambda, Gamma, zeta, chi) solve four coupled ODEs backward from
(P, P + Pbar, 0, 0).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from mfcq._linalg import negdef_inverse, sym
from mfcq.errors import ConditionHError, DefinitenessError, DivergenceError, InvariantViolation
from mfcq.measure import MeasureSlice
from mfcq.model import CoefficientSlice, LQModel, coefficients_at, validate_condition_H
from mfcq.policy import GaussianPolicy

KBAR_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class AuxiliaryBlocks:
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    Y: np.ndarray


def _blocks(c: CoefficientSlice, Lam, Gam, zeta) -> AuxiliaryBlocks:
    FtL = c.F.T @ Lam
    FotL = c.Fo.T @ Lam
    FotG = c.Fo.T @ Gam
    FtLF = FtL @ c.F
    return AuxiliaryBlocks(
        U=sym(FtLF + FotL @ c.Fo + c.R),
        V=sym(FtLF + FotG @ c.Fo + c.R),
        S=c.C.T @ Lam + FtL @ c.D + FotL @ c.Do,
        Z=c.C.T @ Gam + FtL @ (c.D + c.Dbar) + FotG @ (c.Do + c.Dbar_o),
        Y=c.C.T @ zeta + 2.0 * FtL @ c.theta + 2.0 * FotG @ c.theta_o,
    )


def auxiliary_blocks(model: LQModel, t: float, Lam, Gam, zeta) -> AuxiliaryBlocks:
    Lam = np.asarray(Lam, float).reshape(model.d, model.d)
    Gam = np.asarray(Gam, float).reshape(model.d, model.d)
    zeta = np.asarray(zeta, float).reshape(model.d)
    return _blocks(coefficients_at(model, t), Lam, Gam, zeta)


_COMBINED: dict[int, tuple] = {}


def _combined(c: CoefficientSlice):
    """(D + Dbar, Do + Dbar_o, B + Bbar, M + Mbar), memoised per slice object."""
    hit = _COMBINED.get(id(c))
    if hit is not None and hit[0] is c:
        return hit[1]
    val = (c.D + c.Dbar, c.Do + c.Dbar_o, c.B + c.Bbar, c.M + c.Mbar)
    if len(_COMBINED) > 4096:
        _COMBINED.clear()
    _COMBINED[id(c)] = (c, val)
    return val


def _rhs(c: CoefficientSlice, gamma: float, t: float, Lam, Gam, zeta):
    blk = _blocks(c, Lam, Gam, zeta)
    Uinv, logdet_negU, negdef = negdef_inverse(blk.U, "U", t)
    if not negdef:
        raise DefinitenessError(f"U is not negative definite at t={t:.6g}; the Gaussian policy is undefined")
    Vinv, _, _ = negdef_inverse(blk.V, "V", t)
    p = len(blk.U)
    DD, DDo, BB, MM = _combined(c)
    VinvZ = Vinv @ blk.Z
    dLam = -(c.M + c.D.T @ Lam @ c.D + c.Do.T @ Lam @ c.Do + c.B.T @ Lam + Lam @ c.B - blk.S.T @ Uinv @ blk.S)
    dGam = -(
        MM + DD.T @ Lam @ DD + DDo.T @ Gam @ DDo + BB.T @ Gam + Gam @ BB - blk.Z.T @ VinvZ
    )
    dzeta = -(
        BB.T @ zeta
        + 2.0 * Gam @ c.b0
        + 2.0 * DD.T @ Lam @ c.theta
        + 2.0 * DDo.T @ Gam @ c.theta_o
        - VinvZ.T @ blk.Y
        + c.O
    )
    # (gamma/2) log((-gamma pi)^p det U^{-1}) with pi the circle constant
    ent = 0.5 * gamma * (p * math.log(gamma * math.pi) - logdet_negU)
    dchi = -(
        c.theta @ Lam @ c.theta
        + c.theta_o @ Gam @ c.theta_o
        + c.b0 @ zeta
        - 0.25 * blk.Y @ Vinv @ blk.Y
        + ent
    )
    return sym(dLam), sym(dGam), dzeta, float(dchi)


def riccati_rhs(model: LQModel, t: float, Lam, Gam, zeta, chi=0.0):
    """Time derivatives (dLambda, dGamma, dzeta, dchi) at ``t``.

    ``chi`` does not enter the right-hand side; it is accepted for symmetry.
    """
    d = model.d
    return _rhs(
        coefficients_at(model, t),
        model.gamma,
        t,
        np.asarray(Lam, float).reshape(d, d),
        np.asarray(Gam, float).reshape(d, d),
        np.asarray(zeta, float).reshape(d),
    )


def _hermite(t0, t1, y0, y1, dy0, dy1, t):
    h = t1 - t0
    s = (t - t0) / h
    s2, s3 = s * s, s * s * s
    val = (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * dy0 + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * dy1
    der = ((6 * s2 - 6 * s) * y0 + (3 * s2 - 4 * s + 1) * h * dy0 + (-6 * s2 + 6 * s) * y1 + (3 * s2 - 2 * s) * h * dy1) / h
    return val, der


def _fd_nodes(y: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order finite-difference derivative at each node of a uniform grid."""
    n = len(y)
    if n < 5:
        return np.gradient(y, h, axis=0)
    out = np.empty_like(y)
    out[2:-2] = (-y[4:] + 8 * y[3:-1] - 8 * y[1:-3] + y[:-4]) / (12 * h)
    out[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * h)
    out[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * h)
    out[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * h)
    out[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * h)
    return out


@dataclass(frozen=True)
class QuadraticValue:
    """Time-gridded coefficients of a quadratic value function plus their node derivatives."""

    times: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray
    zeta: np.ndarray
    chi: np.ndarray
    dLambda: np.ndarray
    dGamma: np.ndarray
    dzeta: np.ndarray
    dchi: np.ndarray
    steps: int
    method: str

    _FIELDS = ("Lambda", "Gamma", "zeta", "chi")

    @property
    def d(self) -> int:
        return self.Lambda.shape[1]

    def _locate(self, t: float) -> tuple[int, bool]:
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"t={t} outside the solution grid [{ts[0]}, {ts[-1]}]")
        k = int(round(t / (ts[1] - ts[0])))
        if 0 <= k < len(ts) and abs(ts[k] - t) <= 1e-12 * max(1.0, ts[-1]):
            return k, True
        k = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), len(ts) - 2)
        return k, False

    def at(self, t: float):
        """(Lambda, Gamma, zeta, chi) at ``t``; cubic Hermite between nodes."""
        return self._eval(t)[0]

    def derivative_at(self, t: float):
        return self._eval(t)[1]

    def _eval(self, t: float):
        k, exact = self._locate(t)
        ys = [getattr(self, f) for f in self._FIELDS]
        dys = [self.dLambda, self.dGamma, self.dzeta, self.dchi]
        if exact:
            return tuple(y[k] for y in ys), tuple(dy[k] for dy in dys)
        t0, t1 = self.times[k], self.times[k + 1]
        pairs = [_hermite(t0, t1, y[k], y[k + 1], dy[k], dy[k + 1], t) for y, dy in zip(ys, dys)]
        return tuple(v for v, _ in pairs), tuple(dv for _, dv in pairs)

    def value(self, t: float, mu: MeasureSlice) -> float:
        Lam, Gam, zeta, chi = self.at(t)
        return _quadratic_form(Lam, Gam, zeta, chi, mu)

    def dvalue_dt(self, t: float, mu: MeasureSlice) -> float:
        """Time derivative of J(t, mu) from the ODE right-hand sides (chain rule)."""
        return _quadratic_form(*self.derivative_at(t), mu)

    def fd_dvalue_dt(self, t: float, mu: MeasureSlice) -> float:
        """Time derivative of J(t, mu) by finite differences of the stored nodes.

        Independent of the right-hand side, so it can test a solution for
        consistency with the HJB equation.
        """
        h = self.times[1] - self.times[0]
        ders = [_fd_nodes(getattr(self, f), h) for f in self._FIELDS]
        k, exact = self._locate(t)
        if exact:
            vals = [dv[k] for dv in ders]
        else:
            w = (t - self.times[k]) / h
            vals = [(1 - w) * dv[k] + w * dv[k + 1] for dv in ders]
        return _quadratic_form(*vals, mu)

    def max_block_difference(self, other: "QuadraticValue") -> float:
        if not np.array_equal(self.times, other.times):
            raise ValueError("solutions are on different grids")
        return max(float(np.max(np.abs(getattr(self, f) - getattr(other, f)))) for f in self._FIELDS)


def _quadratic_form(Lam, Gam, zeta, chi, mu: MeasureSlice) -> float:
    m = mu.mean
    return float(np.trace(Lam @ mu.cov) + m @ Gam @ m + m @ zeta + chi)


@dataclass(frozen=True)
class RiccatiSolution(QuadraticValue):
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def blocks(self, k: int) -> AuxiliaryBlocks:
        return AuxiliaryBlocks(self.U[k], self.V[k], self.S[k], self.Z[k], self.Y[k])

    def shifted(self, model: LQModel, *, dLambda=0.0, dGamma=0.0, dzeta=0.0, dchi=0.0) -> "RiccatiSolution":
        """Copy with constant offsets added at every node (terminal values included).

        Node derivatives are kept: a constant offset does not change them.
        Used to check that residual tests have power.
        """
        d = model.d
        Lam = self.Lambda + np.asarray(dLambda, float) * (np.eye(d) if np.ndim(dLambda) == 0 else 1.0)
        Gam = self.Gamma + np.asarray(dGamma, float) * (np.eye(d) if np.ndim(dGamma) == 0 else 1.0)
        zeta = self.zeta + dzeta
        chi = self.chi + dchi
        base = replace(self, Lambda=Lam, Gamma=Gam, zeta=zeta, chi=chi)
        return _attach_blocks(model, base)

    def to_csv(self, path) -> None:
        d = self.d
        p = self.U.shape[1]
        mat = lambda n, r, c: [f"{n}[{i}][{j}]" for i in range(r) for j in range(c)]  # noqa: E731
        header = ["t", *mat("Lambda", d, d), *mat("Gamma", d, d), *[f"zeta[{i}]" for i in range(d)], "chi"]
        header += [*mat("U", p, p), *mat("V", p, p), *mat("S", p, d), *mat("Z", p, d), *[f"Y[{i}]" for i in range(p)]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.Lambda[k].ravel(), *self.Gamma[k].ravel(), *self.zeta[k], self.chi[k]]
                row += [*self.U[k].ravel(), *self.V[k].ravel(), *self.S[k].ravel(), *self.Z[k].ravel(), *self.Y[k]]
                w.writerow([repr(float(v)) for v in row])


def _attach_blocks(model: LQModel, sol: QuadraticValue) -> RiccatiSolution:
    slices = model.slices_on(sol.times)
    blks = [_blocks(c, sol.Lambda[k], sol.Gamma[k], sol.zeta[k]) for k, c in enumerate(slices)]
    fields_ = {f: getattr(sol, f) for f in sol.__dataclass_fields__ if not f.startswith("_")}
    fields_.pop("U", None), fields_.pop("V", None), fields_.pop("S", None), fields_.pop("Z", None), fields_.pop("Y", None)
    return RiccatiSolution(
        **fields_,
        U=np.stack([b.U for b in blks]),
        V=np.stack([b.V for b in blks]),
        S=np.stack([b.S for b in blks]),
        Z=np.stack([b.Z for b in blks]),
        Y=np.stack([b.Y for b in blks]),
    )


def rk4_backward(rhs, terminal, horizon: float, steps: int, slices, symmetric=(0, 1)):
    """Classical RK4 from ``horizon`` down to 0 on ``steps`` uniform steps.

    ``rhs(c, t, *state)`` returns a tuple of derivatives. ``slices`` holds the
    coefficient slices on the half-step grid (2*steps + 1 points). Returns the
    node states (index 0 is t=0) and node derivatives.
    """
    h = horizon / steps
    n = steps + 1
    nstate = len(terminal)
    states = [np.empty((n,) + np.shape(y)) for y in terminal]
    ders = [np.empty((n,) + np.shape(y)) for y in terminal]
    y = tuple(np.array(v, dtype=float) for v in terminal)
    t_of = lambda j: horizon * j / (2 * steps)  # noqa: E731
    k1 = rhs(slices[2 * steps], horizon, *y)
    for i in range(nstate):
        states[i][steps] = y[i]
        ders[i][steps] = k1[i]
    for k in range(steps, 0, -1):
        t = t_of(2 * k)
        try:
            ya = tuple(y[i] - 0.5 * h * k1[i] for i in range(nstate))
            k2 = rhs(slices[2 * k - 1], t_of(2 * k - 1), *ya)
            yb = tuple(y[i] - 0.5 * h * k2[i] for i in range(nstate))
            k3 = rhs(slices[2 * k - 1], t_of(2 * k - 1), *yb)
            yc = tuple(y[i] - h * k3[i] for i in range(nstate))
            k4 = rhs(slices[2 * k - 2], t_of(2 * k - 2), *yc)
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            raise DivergenceError(f"integration failed below t={t:.6g}: {exc}", t=t, step=k) from None
        y = tuple(y[i] - h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(nstate))
        y = tuple(sym(v) if i in symmetric else v for i, v in enumerate(y))
        if not all(np.all(np.isfinite(v)) for v in y):
            raise DivergenceError(f"non-finite solution below t={t:.6g}", t=t, step=k)
        k1 = rhs(slices[2 * k - 2], t_of(2 * k - 2), *y)
        for i in range(nstate):
            states[i][k - 1] = y[i]
            ders[i][k - 1] = k1[i]
    return states, ders


def solve_backward(
    model: LQModel, steps: int = 1000, *, check: str = "raise", delta: float = 1e-8
) -> RiccatiSolution:
    """Integrate the Riccati system backward with fixed-step RK4.

    ``check`` controls the condition (H) pre-check: "raise", "warn" or "skip".
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if check not in ("raise", "warn", "skip"):
        raise ValueError(f"unknown check mode {check!r}")
    if check != "skip":
        report = validate_condition_H(model, delta)
        if not report.holds:
            if check == "raise":
                raise ConditionHError(report)
            warnings.warn(f"condition (H) violated: {', '.join(report.violations)}", stacklevel=2)
    d = model.d
    slices = model.slices_on(np.linspace(0.0, model.horizon, 2 * steps + 1))
    gamma = model.gamma

    def rhs(c, t, Lam, Gam, zeta, chi):
        return _rhs(c, gamma, t, Lam, Gam, zeta)

    terminal = (model.P.copy(), model.P + model.Pbar, np.zeros(d), np.array(0.0))
    (Lam, Gam, zeta, chi), (dL, dG, dz, dc) = rk4_backward(rhs, terminal, model.horizon, steps, slices)
    Lam[-1], Gam[-1] = model.P, model.P + model.Pbar
    zeta[-1], chi[-1] = 0.0, 0.0
    base = QuadraticValue(
        times=np.linspace(0.0, model.horizon, steps + 1),
        Lambda=Lam, Gamma=Gam, zeta=zeta, chi=chi,
        dLambda=dL, dGamma=dG, dzeta=dz, dchi=dc,
        steps=steps, method="rk4",
    )
    return _attach_blocks(model, base)


def optimal_policy(solution: RiccatiSolution, model: LQModel) -> GaussianPolicy:
    """Gaussian policy K(x - mubar) + Kbar mubar + K0 with covariance -(gamma/2) U^{-1}."""
    n = len(solution.times)
    K = np.empty_like(solution.S)
    Kbar = np.empty_like(solution.Z)
    K0 = np.empty_like(solution.Y)
    Sigma = np.empty_like(solution.U)
    for k in range(n):
        t = float(solution.times[k])
        Uinv, _, negU = negdef_inverse(solution.U[k], "U", t)
        Vinv, _, _ = negdef_inverse(solution.V[k], "V", t)
        if not negU:
            raise DefinitenessError(f"Sigma = -(gamma/2) U^-1 is not positive definite at t={t:.6g}")
        K[k] = -Uinv @ solution.S[k]
        Kbar[k] = -np.linalg.solve(solution.V[k], solution.Z[k])
        K0[k] = -0.5 * Vinv @ solution.Y[k]
        Sigma[k] = sym(-0.5 * model.gamma * Uinv)
    policy = GaussianPolicy(solution.times.copy(), K, Kbar, K0, Sigma)
    res = kbar_identity_residual(solution, policy, model)
    scale = max(1.0, float(np.max(np.abs(solution.Z))), float(np.max(np.abs(solution.V))))
    if res > KBAR_RESIDUAL_TOL * scale:
        raise InvariantViolation(f"(U + Fo'(Gamma - Lambda) Fo) Kbar + Z residual {res:.3g} too large")
    return policy


def kbar_identity_residual(solution: RiccatiSolution, policy: GaussianPolicy, model: LQModel) -> float:
    """max over nodes of |(U + Fo'(Gamma - Lambda)Fo) Kbar + Z|."""
    worst = 0.0
    for k, c in enumerate(model.slices_on(solution.times)):
        lhs = solution.U[k] + c.Fo.T @ (solution.Gamma[k] - solution.Lambda[k]) @ c.Fo
        worst = max(worst, float(np.max(np.abs(lhs @ policy.Kbar[k] + solution.Z[k]))))
    return worst


def kbar_fixed_point(U, Z, coupling, tol: float = 1e-13, max_iter: int = 500):
    """Iterate Kbar <- -U^{-1}(Z + coupling Kbar) with coupling = Fo'(Gamma - Lambda)Fo.

    Kept as a cross-check of the direct solve V Kbar = -Z. Returns
    ``(Kbar, iterations, converged)``.
    """
    Kbar = -np.linalg.solve(U, Z)
    for it in range(1, max_iter + 1):
        nxt = -np.linalg.solve(U, Z + coupling @ Kbar)
        if np.max(np.abs(nxt - Kbar)) <= tol:
            return nxt, it, True
        Kbar = nxt
    return Kbar, max_iter, False
