"""Gaussian and tabular feedback policies: density, sampling, entropy, moments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mfcq._linalg import sym, sym_sqrt
from mfcq.errors import DefinitenessError
from mfcq.model import LQModel, coefficients_at

LOG_2PI = math.log(2.0 * math.pi)


def _interp_weights(times: np.ndarray, t: float) -> tuple[int, float]:
    if t <= times[0]:
        return 0, 0.0
    if t >= times[-1]:
        return len(times) - 2, 1.0
    k = int(np.searchsorted(times, t, side="right")) - 1
    return k, (t - times[k]) / (times[k + 1] - times[k])


@dataclass(frozen=True)
class GaussianPolicy:
    """pi(.|t,x,mu) = N(K(x - mubar) + Kbar mubar + K0, Sigma), blocks linear in t."""

    times: np.ndarray
    K: np.ndarray  # (n, p, d)
    Kbar: np.ndarray  # (n, p, d)
    K0: np.ndarray  # (n, p)
    Sigma: np.ndarray  # (n, p, p)
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.times)
        if n < 2:
            raise ValueError("a policy needs at least two time nodes")
        p, d = self.K.shape[1:]
        for name, arr, shape in (
            ("K", self.K, (n, p, d)),
            ("Kbar", self.Kbar, (n, p, d)),
            ("K0", self.K0, (n, p)),
            ("Sigma", self.Sigma, (n, p, p)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        try:
            chol = np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError:
            raise DefinitenessError("policy covariance Sigma is not positive definite at some node") from None
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def constant(cls, horizon: float, K, Kbar, K0, Sigma, d: int = 1, p: int = 1) -> "GaussianPolicy":
        times = np.array([0.0, float(horizon)])
        K = np.broadcast_to(np.asarray(K, float).reshape(p, d), (2, p, d)).copy()
        Kbar = np.broadcast_to(np.asarray(Kbar, float).reshape(p, d), (2, p, d)).copy()
        K0 = np.broadcast_to(np.asarray(K0, float).reshape(p), (2, p)).copy()
        Sigma = np.broadcast_to(np.asarray(Sigma, float).reshape(p, p), (2, p, p)).copy()
        return cls(times, K, Kbar, K0, Sigma)

    @property
    def p(self) -> int:
        return self.K.shape[1]

    @property
    def d(self) -> int:
        return self.K.shape[2]

    def blocks(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        k, w = _interp_weights(self.times, t)
        if w == 0.0:
            return self.K[k], self.Kbar[k], self.K0[k], self.Sigma[k]
        lerp = lambda a: (1.0 - w) * a[k] + w * a[k + 1]  # noqa: E731
        return lerp(self.K), lerp(self.Kbar), lerp(self.K0), lerp(self.Sigma)

    def blocks_on(self, times) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        times = np.asarray(times, dtype=float)
        out = []
        for arr in (self.K, self.Kbar, self.K0, self.Sigma):
            flat = arr.reshape(len(self.times), -1)
            cols = [np.interp(times, self.times, flat[:, j]) for j in range(flat.shape[1])]
            out.append(np.stack(cols, axis=-1).reshape((len(times),) + arr.shape[1:]))
        return tuple(out)

    def chol(self, t: float) -> np.ndarray:
        k, w = _interp_weights(self.times, t)
        if w == 0.0:
            return self._chol[k]
        return np.linalg.cholesky(self.blocks(t)[3])

    def mean(self, t: float, x, mubar) -> np.ndarray:
        """Action mean; ``x`` may be a batch of shape ``(N, d)``."""
        K, Kbar, K0, _ = self.blocks(t)
        x = np.asarray(x, dtype=float)
        mubar = np.asarray(mubar, dtype=float)
        return (x - mubar) @ K.T + mubar @ Kbar.T + K0

    def with_blocks(self, *, K=None, Kbar=None, K0=None, Sigma=None) -> "GaussianPolicy":
        return GaussianPolicy(
            self.times,
            self.K if K is None else np.asarray(K, float),
            self.Kbar if Kbar is None else np.asarray(Kbar, float),
            self.K0 if K0 is None else np.asarray(K0, float),
            self.Sigma if Sigma is None else np.asarray(Sigma, float),
        )

    def to_csv(self, path) -> None:
        p, d = self.p, self.d
        header = ["t"]
        header += [f"K[{i}][{j}]" for i in range(p) for j in range(d)]
        header += [f"Kbar[{i}][{j}]" for i in range(p) for j in range(d)]
        header += [f"K0[{i}]" for i in range(p)]
        header += [f"Sigma[{i}][{j}]" for i in range(p) for j in range(p)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.K[k].ravel(), *self.Kbar[k].ravel(), *self.K0[k], *self.Sigma[k].ravel()]
                w.writerow([repr(float(v)) for v in row])


def action_grid(center, std, nodes: int = 257, radius: float = 6.0) -> tuple[np.ndarray, float]:
    """Tensor grid of action cell centres on ``center +- radius*std`` per axis.

    Returns ``(nodes (A, p), cell_volume)``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    std = np.broadcast_to(np.atleast_1d(np.asarray(std, dtype=float)), center.shape)
    axes = [np.linspace(c - radius * s, c + radius * s, nodes) for c, s in zip(center, std)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(center))
    vol = float(np.prod([a[1] - a[0] for a in axes]))
    return mesh, vol


@dataclass(frozen=True)
class TabularPolicy:
    """Grid density rho[g, j] over state nodes x_g and action cells a_j at one (t, mu)."""

    state_nodes: np.ndarray  # (G, d)
    action_nodes: np.ndarray  # (A, p)
    cell_volume: float
    density: np.ndarray  # (G, A)
    t: float = 0.0
    mu: object = None
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        G, A = self.density.shape
        if self.state_nodes.shape[0] != G or self.action_nodes.shape[0] != A:
            raise ValueError("density shape does not match state/action nodes")
        if np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
            raise ValueError("density must be finite and non-negative")
        if self.check:
            mass = self.density.sum(axis=1) * self.cell_volume
            if np.max(np.abs(mass - 1.0)) > 1e-9:
                raise ValueError(f"density not normalized (max mass error {np.max(np.abs(mass - 1.0)):.3g})")

    @classmethod
    def uniform(cls, state_nodes, action_nodes, cell_volume, t=0.0, mu=None) -> "TabularPolicy":
        state_nodes = np.asarray(state_nodes, float).reshape(len(state_nodes), -1)
        action_nodes = np.asarray(action_nodes, float).reshape(len(action_nodes), -1)
        rho = np.full((len(state_nodes), len(action_nodes)), 1.0 / (len(action_nodes) * cell_volume))
        return cls(state_nodes, action_nodes, float(cell_volume), rho, t, mu)

    @classmethod
    def from_gaussian(cls, policy: GaussianPolicy, t, state_nodes, mubar, action_nodes, cell_volume, mu=None):
        """Discretize a Gaussian policy cell-wise and renormalize on the grid."""
        state_nodes = np.asarray(state_nodes, float).reshape(len(state_nodes), -1)
        action_nodes = np.asarray(action_nodes, float).reshape(len(action_nodes), -1)
        means = policy.mean(t, state_nodes, np.asarray(mubar, float))
        Sigma = policy.blocks(t)[3]
        logp = _gaussian_logpdf(action_nodes[None, :, :], means[:, None, :], Sigma)
        return cls.from_log_density(state_nodes, action_nodes, cell_volume, logp, t, mu)

    @classmethod
    def from_log_density(cls, state_nodes, action_nodes, cell_volume, logp, t=0.0, mu=None):
        logp = logp - logp.max(axis=1, keepdims=True)
        rho = np.exp(logp)
        rho /= rho.sum(axis=1, keepdims=True) * cell_volume
        return cls(state_nodes, action_nodes, float(cell_volume), rho, t, mu)

    def nearest(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return int(np.argmin(np.sum((self.state_nodes - x) ** 2, axis=1)))

    def action_mean(self) -> np.ndarray:
        """Per-state-node action mean, shape ``(G, p)``."""
        return (self.density * self.cell_volume) @ self.action_nodes

    def action_cov(self) -> np.ndarray:
        m = self.action_mean()
        w = self.density * self.cell_volume
        second = np.einsum("ga,ai,aj->gij", w, self.action_nodes, self.action_nodes)
        return sym(second - m[:, :, None] * m[:, None, :])

    def mix(self, other: "TabularPolicy", lam: float) -> "TabularPolicy":
        """``(1 - lam) * self + lam * other`` on a shared grid."""
        rho = (1.0 - lam) * self.density + lam * other.density
        return TabularPolicy(self.state_nodes, self.action_nodes, self.cell_volume, rho, self.t, self.mu)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state_node"] + [f"x[{i}]" for i in range(self.state_nodes.shape[1])]
                       + [f"a{j}" for j in range(len(self.action_nodes))])
            for i in range(self.action_nodes.shape[1]):
                w.writerow(["action_nodes", *([""] * self.state_nodes.shape[1]),
                            *[repr(float(v)) for v in self.action_nodes[:, i]]])
            for g, x in enumerate(self.state_nodes):
                w.writerow([g, *[repr(float(v)) for v in x], *[repr(float(v)) for v in self.density[g]]])


def _gaussian_logpdf(a, mean, Sigma) -> np.ndarray:
    p = Sigma.shape[0]
    L = np.linalg.cholesky(Sigma)
    dev = a - mean
    z = np.linalg.solve(L, np.moveaxis(dev, -1, 0).reshape(p, -1)).reshape((p,) + dev.shape[:-1])
    quad = np.sum(z * z, axis=0)
    return -0.5 * quad - 0.5 * p * LOG_2PI - np.log(np.diag(L)).sum()


def density(policy: GaussianPolicy, t: float, x, mubar, a) -> float:
    mean = policy.mean(t, np.atleast_1d(x), np.atleast_1d(mubar))
    Sigma = policy.blocks(t)[3]
    return float(np.exp(_gaussian_logpdf(np.atleast_1d(np.asarray(a, float)), mean, Sigma)))


def sample(policy, t: float, x, mubar, noise):
    """Draw an action from a caller-supplied primitive.

    Gaussian policies take a standard normal vector ``noise``; tabular
    policies take a uniform in [0, 1) and invert the cell CDF of the state
    node nearest to ``x``.
    """
    if isinstance(policy, TabularPolicy):
        g = policy.nearest(x)
        cdf = np.cumsum(policy.density[g] * policy.cell_volume)
        j = int(np.searchsorted(cdf, float(noise) * cdf[-1], side="right"))
        return policy.action_nodes[min(j, len(cdf) - 1)].copy()
    mean = policy.mean(t, np.atleast_1d(x), np.atleast_1d(mubar))
    return mean + policy.chol(t) @ np.atleast_1d(np.asarray(noise, float))


def gaussian_entropy(Sigma: np.ndarray) -> float:
    p = Sigma.shape[0]
    _, logdet = np.linalg.slogdet(Sigma)
    return 0.5 * (p * (LOG_2PI + 1.0) + logdet)


def entropy(policy, t: float = 0.0, x=None, mubar=None) -> float:
    """Shannon (differential) entropy of the action law at (t, x, mu)."""
    if isinstance(policy, TabularPolicy):
        g = 0 if x is None else policy.nearest(x)
        return tabular_entropy(policy)[g]
    return gaussian_entropy(policy.blocks(t)[3])


def tabular_entropy(policy: TabularPolicy) -> np.ndarray:
    rho = policy.density
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rho > 0, rho * np.log(np.where(rho > 0, rho, 1.0)), 0.0)
    return -policy.cell_volume * terms.sum(axis=1)


@dataclass(frozen=True)
class PolicyMoments:
    b: np.ndarray
    sigma: np.ndarray
    sigma_o: np.ndarray
    cov_sigma: np.ndarray
    cov_sigma_o: np.ndarray
    std_sigma: np.ndarray
    std_sigma_o: np.ndarray


def coefficient_moments(model: LQModel, policy, t: float, x, mubar) -> PolicyMoments:
    """Mean and covariance of b, sigma, sigma_o under the action law (exact for affine-in-a data)."""
    c = coefficients_at(model, t)
    x = np.atleast_1d(np.asarray(x, float))
    mubar = np.atleast_1d(np.asarray(mubar, float))
    if isinstance(policy, TabularPolicy):
        g = policy.nearest(x)
        m = policy.action_mean()[g]
        S = policy.action_cov()[g]
    else:
        m = policy.mean(t, x, mubar)
        S = policy.blocks(t)[3]
    cov_s = sym(c.F @ S @ c.F.T)
    cov_o = sym(c.Fo @ S @ c.Fo.T)
    return PolicyMoments(
        b=c.b0 + c.B @ x + c.Bbar @ mubar + c.C @ m,
        sigma=c.theta + c.D @ x + c.Dbar @ mubar + c.F @ m,
        sigma_o=c.theta_o + c.Do @ x + c.Dbar_o @ mubar + c.Fo @ m,
        cov_sigma=cov_s,
        cov_sigma_o=cov_o,
        std_sigma=sym_sqrt(cov_s, name="cov(sigma)"),
        std_sigma_o=sym_sqrt(cov_o, name="cov(sigma_o)"),
    )
