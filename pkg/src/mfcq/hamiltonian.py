"""Hamiltonian, integrated Hamiltonian, its linear functional derivative, Iq-function and HJB residual.

All measure integrals are evaluated on the quadrature nodes of a
:class:`~mfcq.measure.MeasureSlice`. Action integrals use Gauss-Hermite
nodes for Gaussian kernels and the cell grid for tabular kernels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from mfcq._linalg import negdef_inverse, sym
from mfcq.measure import DEFAULT_ORDER, MeasureSlice
from mfcq.model import CoefficientSlice, LQModel, coefficients_at
from mfcq.policy import GaussianPolicy, TabularPolicy, gaussian_entropy, tabular_entropy
from mfcq.riccati import QuadraticValue, _blocks


@dataclass(frozen=True)
class ValueDerivativeBundle:
    """Derivatives of J(t, mu) in the measure argument.

    ``dJ_dmu(t, x, mubar)`` accepts a batch ``x`` of shape ``(n, d)``.
    ``d2_mu_pair(t, x, x2)``, if given, overrides the constant ``d2_mu(t)``
    in the double-measure term and forces the pairwise summation path.
    """

    dJ_dmu: Callable
    dx_dmu: Callable
    d2_mu: Callable
    dJ_dt: Callable
    provenance: str = "user-supplied"
    d2_mu_pair: Callable | None = None

    @classmethod
    def from_quadratic(cls, sol: QuadraticValue) -> "ValueDerivativeBundle":
        def dJ_dmu(t, x, mubar):
            Lam, Gam, zeta, _ = sol.at(t)
            x = np.asarray(x, float)
            mubar = np.asarray(mubar, float)
            return 2.0 * (x - mubar) @ Lam.T + 2.0 * (Gam @ mubar) + zeta

        def dx_dmu(t):
            return 2.0 * sol.at(t)[0]

        def d2_mu(t):
            Lam, Gam, _, _ = sol.at(t)
            return 2.0 * (Gam - Lam)

        return cls(dJ_dmu, dx_dmu, d2_mu, sol.dvalue_dt, provenance="riccati-derived")


# ------------------------------------------------------------------ pointwise H


def _H(c: CoefficientSlice, x, mubar, a, p_vec, q_mat):
    """Vectorised H; ``x``/``p_vec`` broadcast against ``a`` on leading axes."""
    drift = c.b0 + x @ c.B.T + c.Bbar @ mubar + a @ c.C.T
    sig = c.theta + x @ c.D.T + c.Dbar @ mubar + a @ c.F.T
    sigo = c.theta_o + x @ c.Do.T + c.Dbar_o @ mubar + a @ c.Fo.T
    run = (
        np.einsum("...i,ij,...j->...", x, c.M, x)
        + mubar @ c.Mbar @ mubar
        + np.einsum("...i,ij,...j->...", a, c.R, a)
        + x @ c.O
    )
    diff = np.einsum("...i,ij,...j->...", sig, q_mat, sig) + np.einsum("...i,ij,...j->...", sigo, q_mat, sigo)
    return np.sum(drift * p_vec, axis=-1) + 0.5 * diff + run


def hamiltonian(model: LQModel, t: float, x, mubar, a, p_vec, q_mat) -> float | np.ndarray:
    """b'p + (1/2) Tr((sig sig' + sigo sigo') q) + r for LQ coefficients."""
    c = coefficients_at(model, t)
    out = _H(
        c,
        np.asarray(x, float),
        np.atleast_1d(np.asarray(mubar, float)),
        np.asarray(a, float),
        np.asarray(p_vec, float),
        np.asarray(q_mat, float).reshape(model.d, model.d),
    )
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------ kernels on nodes


@dataclass(frozen=True)
class _KernelOnNodes:
    actions: np.ndarray  # (G, m, p)
    weights: np.ndarray  # (G, m), rows sum to one
    entropy: np.ndarray  # (G,)


def _kernel_on(h, t: float, X: np.ndarray, mubar: np.ndarray, order: int) -> _KernelOnNodes:
    if isinstance(h, TabularPolicy):
        idx = np.array([h.nearest(x) for x in X])
        acts = np.broadcast_to(h.action_nodes, (len(X),) + h.action_nodes.shape)
        wts = h.density[idx] * h.cell_volume
        wts = wts / wts.sum(axis=1, keepdims=True)
        return _KernelOnNodes(acts, wts, tabular_entropy(h)[idx])
    Sigma = h.blocks(t)[3]
    p = Sigma.shape[0]
    z, w = hermegauss(order)
    w = w / w.sum()
    grid = np.stack(np.meshgrid(*([z] * p), indexing="ij"), axis=-1).reshape(-1, p)
    wg = np.prod(np.stack(np.meshgrid(*([w] * p), indexing="ij"), axis=-1).reshape(-1, p), axis=1)
    L = np.linalg.cholesky(Sigma)
    means = h.mean(t, X, mubar)
    acts = means[:, None, :] + grid @ L.T
    return _KernelOnNodes(acts, np.broadcast_to(wg, (len(X), len(wg))), np.full(len(X), gaussian_entropy(Sigma)))


def _sigma_o_mean(c: CoefficientSlice, X, mubar, kern: _KernelOnNodes) -> np.ndarray:
    """Per-node h-mean of sigma_o, shape (G, d)."""
    abar = np.einsum("gm,gmp->gp", kern.weights, kern.actions)
    return c.theta_o + X @ c.Do.T + c.Dbar_o @ mubar + abar @ c.Fo.T


def _double_term(c, t, X, wx, mubar, kern, bundle: ValueDerivativeBundle) -> float:
    so = _sigma_o_mean(c, X, mubar, kern)
    if bundle.d2_mu_pair is None:
        m = wx @ so
        return 0.5 * float(m @ bundle.d2_mu(t) @ m)
    total = 0.0
    for i in range(len(X)):
        for j in range(len(X)):
            Q = bundle.d2_mu_pair(t, X[i], X[j])
            total += wx[i] * wx[j] * float(so[j] @ Q @ so[i])
    return 0.5 * total


def integrated_hamiltonian(
    model: LQModel,
    t: float,
    mu: MeasureSlice,
    h,
    bundle: ValueDerivativeBundle,
    regularized: bool = False,
    order: int = DEFAULT_ORDER,
) -> float:
    """Integrated Hamiltonian under kernel ``h`` at ``(t, mu)``; adds gamma * entropy if regularized."""
    c = coefficients_at(model, t)
    X, wx = mu.nodes(order)
    mubar = mu.mean
    kern = _kernel_on(h, t, X, mubar, order)
    pv = bundle.dJ_dmu(t, X, mubar)
    q = bundle.dx_dmu(t)
    Hvals = _H(c, X[:, None, :], mubar, kern.actions, pv[:, None, :], q)
    first = float(wx @ np.sum(Hvals * kern.weights, axis=1))
    total = first + _double_term(c, t, X, wx, mubar, kern, bundle)
    if regularized:
        total += model.gamma * float(wx @ kern.entropy)
    return total


def entropy_functional(model: LQModel, t: float, mu: MeasureSlice, h, order: int = DEFAULT_ORDER) -> float:
    X, wx = mu.nodes(order)
    return float(wx @ _kernel_on(h, t, X, mu.mean, order).entropy)


def variational_derivative_grid(
    model: LQModel, t: float, mu: MeasureSlice, h, bundle: ValueDerivativeBundle, X, A, order: int = DEFAULT_ORDER
) -> np.ndarray:
    """delta H / delta h at every pair (X[g], A[j]); returns shape (G, J)."""
    c = coefficients_at(model, t)
    mubar = mu.mean
    Xq, wq = mu.nodes(order)
    so_mean = wq @ _sigma_o_mean(c, Xq, mubar, _kernel_on(h, t, Xq, mubar, order))
    X = np.asarray(X, float).reshape(-1, model.d)
    A = np.asarray(A, float).reshape(-1, model.p)
    pv = bundle.dJ_dmu(t, X, mubar)
    Hvals = _H(c, X[:, None, :], mubar, A[None, :, :], pv[:, None, :], bundle.dx_dmu(t))
    sigo = c.theta_o + X[:, None, :] @ c.Do.T + c.Dbar_o @ mubar + A[None, :, :] @ c.Fo.T
    if bundle.d2_mu_pair is None:
        coupling = sigo @ (bundle.d2_mu(t).T @ so_mean)
    else:
        so_nodes = _sigma_o_mean(c, Xq, mubar, _kernel_on(h, t, Xq, mubar, order))
        coupling = np.zeros(Hvals.shape)
        for g in range(len(X)):
            for k in range(len(Xq)):
                Q = bundle.d2_mu_pair(t, X[g], Xq[k])
                coupling[g] += wq[k] * (sigo[g] @ (Q.T @ so_nodes[k]))
    return Hvals + coupling


def variational_derivative(
    model: LQModel, t: float, mu: MeasureSlice, h, bundle: ValueDerivativeBundle, x, a, order: int = DEFAULT_ORDER
) -> float:
    """H(t,x,mu,a,dJ(x),dxdJ) + int Tr(sigo(x,a) sigo_h(x')' d2J) mu(dx')."""
    return float(variational_derivative_grid(model, t, mu, h, bundle, [x], [a], order)[0, 0])


def iq_function(
    model: LQModel,
    t: float,
    mu: MeasureSlice,
    h,
    bundle: ValueDerivativeBundle,
    value_at: float = 0.0,
    order: int = DEFAULT_ORDER,
) -> tuple[float, float]:
    """Return ``(q_gamma, q_0)``; ``q_0`` drops the gamma-weighted entropy."""
    ent = model.gamma * entropy_functional(model, t, mu, h, order)
    reg = integrated_hamiltonian(model, t, mu, h, bundle, regularized=False, order=order) + ent
    q_gamma = bundle.dJ_dt(t, mu) - model.beta * value_at + reg
    return q_gamma, q_gamma - ent


# ------------------------------------------------------------------ HJB residual


def gaussian_policy_at(model: LQModel, sol: QuadraticValue, t: float) -> GaussianPolicy:
    """The Gibbs maximizer for a quadratic value as a constant-in-time Gaussian kernel."""
    Lam, Gam, zeta, _ = sol.at(t)
    blk = _blocks(coefficients_at(model, t), Lam, Gam, zeta)
    Uinv, _, _ = negdef_inverse(blk.U, "U", t)
    Vinv, _, _ = negdef_inverse(blk.V, "V", t)
    return GaussianPolicy.constant(
        model.horizon,
        -Uinv @ blk.S,
        -Vinv @ blk.Z,
        -0.5 * Vinv @ blk.Y,
        sym(-0.5 * model.gamma * Uinv),
        d=model.d,
        p=model.p,
    )


def hjb_residual(model: LQModel, t: float, mu: MeasureSlice, solution: QuadraticValue, order: int = DEFAULT_ORDER) -> float:
    """dJ/dt + sup_h H^gamma at (t, mu), with dJ/dt from finite differences of the nodes.

    The maximizer is the Gaussian built from the solution's own blocks.
    """
    bundle = ValueDerivativeBundle.from_quadratic(solution)
    pi = gaussian_policy_at(model, solution, t)
    reg = integrated_hamiltonian(model, t, mu, pi, bundle, regularized=True, order=order)
    return solution.fd_dvalue_dt(t, mu) + reg


def hjb_sweep(model, solution, times, measures, path=None, order: int = DEFAULT_ORDER):
    """Residuals over a (t, mu) grid; optional CSV with columns t, mubar, var, residual."""
    rows = []
    for t in times:
        for mu in measures:
            res = hjb_residual(model, float(t), mu, solution, order)
            rows.append((float(t), mu.mean.tolist(), np.diag(mu.cov).tolist(), res))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mubar", "var", "residual"])
            for t, m, v, r in rows:
                w.writerow([repr(t), " ".join(map(repr, m)), " ".join(map(repr, v)), repr(r)])
    return rows
