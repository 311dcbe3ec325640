"""Finite-N particle simulation under sampled-action and relaxed dynamics.

Every particle is driven by the same common increment dB. Random numbers
come from counter-based Philox streams keyed by (seed, replication) with the
counter set from (step, channel), so a draw depends only on where it is used
and not on the order in which it is generated.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mfcq import kernels
from mfcq._linalg import sym_sqrt
from mfcq.errors import DivergenceError
from mfcq.measure import MeasureSlice
from mfcq.model import LQModel
from mfcq.policy import GaussianPolicy, gaussian_entropy

INIT, W, B, ACTION, WBAR, BBAR = range(6)
GRID_TOL = 1e-9


class NoiseBundle:
    """Counter-based normal draws fully determined by (seed, replication, step, channel)."""

    def __init__(self, seed: int, replication: int):
        self.seed = int(seed)
        self.replication = int(replication)

    def normals(self, step: int, channel: int, shape) -> np.ndarray:
        bg = np.random.Philox(key=[self.seed, self.replication], counter=[0, 0, step, channel])
        return np.random.Generator(bg).standard_normal(shape)

    def increments(self, step: int, channel: int, shape, dt: float) -> np.ndarray:
        return math.sqrt(dt) * self.normals(step, channel, shape)


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs.

    ``action_grid`` is either a count of uniform intervals on [0, T] or an
    explicit list of times (which must contain 0); None resamples at every
    simulation step.
    """

    N: int = 10_000
    dt_sim: float = 0.01
    action_grid: int | Sequence[float] | None = None
    seed: int = 0
    replication: int = 0
    mu0: MeasureSlice | None = None
    keep_states: bool = False
    common_bbar: bool = False

    def with_(self, **kw) -> "SimConfig":
        vals = {f: getattr(self, f) for f in self.__dataclass_fields__}
        vals.update(kw)
        return SimConfig(**vals)


def mesh_to_count(horizon: float, mesh: float) -> int:
    n = round(horizon / mesh)
    if abs(n * mesh - horizon) > GRID_TOL * max(1.0, horizon):
        raise ValueError(f"mesh {mesh} does not divide the horizon {horizon}")
    return int(n)


def _steps(model: LQModel, cfg: SimConfig) -> int:
    n = round(model.horizon / cfg.dt_sim)
    if n < 1 or abs(n * cfg.dt_sim - model.horizon) > GRID_TOL * max(1.0, model.horizon):
        raise ValueError(f"dt_sim={cfg.dt_sim} does not divide the horizon {model.horizon}")
    return int(n)


def action_step_mask(model: LQModel, cfg: SimConfig) -> np.ndarray:
    """Boolean mask over simulation steps marking the action-grid nodes."""
    n = _steps(model, cfg)
    mask = np.zeros(n, dtype=bool)
    if cfg.action_grid is None:
        mask[:] = True
        return mask
    if isinstance(cfg.action_grid, (int, np.integer)):
        times = np.linspace(0.0, model.horizon, int(cfg.action_grid) + 1)[:-1]
    else:
        times = np.asarray(sorted(cfg.action_grid), dtype=float)
        times = times[times < model.horizon - GRID_TOL]
    if len(times) == 0 or abs(times[0]) > GRID_TOL:
        raise ValueError("the action grid must contain t=0")
    idx = np.rint(times / cfg.dt_sim).astype(int)
    if np.any(np.abs(idx * cfg.dt_sim - times) > GRID_TOL * max(1.0, model.horizon)):
        raise ValueError("action grid times must lie on the simulation grid (dt_sim must not exceed the mesh)")
    mask[idx] = True
    return mask


@dataclass
class ParticleEnsemble:
    t: float
    X: np.ndarray  # (N, d)
    running: np.ndarray  # (N,) accumulated running reward
    entropy: float  # accumulated gamma * entropy bonus (same for every particle)
    common_path: np.ndarray  # B at the simulation nodes reached so far

    @property
    def N(self) -> int:
        return len(self.X)


@dataclass
class Trajectory:
    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    running_mean: np.ndarray
    final: ParticleEnsemble
    terminal: np.ndarray  # (N,) terminal reward per particle
    states: list[np.ndarray] = field(default_factory=list)

    @property
    def running(self) -> float:
        return float(self.final.running.mean())

    @property
    def entropy(self) -> float:
        return float(self.final.entropy)

    @property
    def terminal_mean(self) -> float:
        return float(self.terminal.mean())

    @property
    def value(self) -> float:
        """Population-average functional of this replication."""
        return self.running + self.entropy + self.terminal_mean

    def to_csv(self, path) -> None:
        d = self.means.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"mean[{i}]" for i in range(d)],
                        *[f"cov[{i}][{j}]" for i in range(d) for j in range(d)], "running_reward_mean"])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(v)) for v in (t, *self.means[k], *self.covs[k].ravel(), self.running_mean[k])])


def conditional_moments(ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean and unbiased covariance of the particle states."""
    X = ensemble.X if isinstance(ensemble, ParticleEnsemble) else np.asarray(ensemble, float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < 2:
        raise ValueError("need at least two particles")
    mean = X.mean(axis=0)
    dev = X - mean
    return mean, dev.T @ dev / (len(X) - 1)


def _initial_states(cfg: SimConfig, d: int, noise: NoiseBundle) -> np.ndarray:
    mu0 = cfg.mu0 or MeasureSlice.dirac(np.zeros(d))
    if mu0.is_particles:
        raise ValueError("initial law must be a Gaussian summary or a point mass")
    if mu0.is_dirac:
        return np.tile(mu0.mean, (cfg.N, 1))
    return mu0.mean + noise.normals(0, INIT, (cfg.N, d)) @ sym_sqrt(mu0.cov).T


def _simulate(model: LQModel, policy: GaussianPolicy, cfg: SimConfig, relaxed: bool) -> Trajectory:
    if cfg.N < 2:
        raise ValueError("N must be at least 2")
    if cfg.common_bbar:
        warnings.warn("common_bbar is a stub: the auxiliary noise Bbar is still drawn per particle", stacklevel=3)
    n = _steps(model, cfg)
    dt = cfg.dt_sim
    d, p = model.d, model.p
    mask = None if relaxed else action_step_mask(model, cfg)
    times = np.linspace(0.0, model.horizon, n + 1)
    slices = model.slices_on(times)
    K, Kbar, K0, Sigma = policy.blocks_on(times)
    noise = NoiseBundle(cfg.seed, cfg.replication)
    need_w = model.has_idiosyncratic_noise
    need_b = model.has_common_noise

    X = _initial_states(cfg, d, noise)
    running = np.zeros(cfg.N)
    ent_total = 0.0
    B_path = np.zeros(n + 1)
    means = np.empty((n + 1, d))
    covs = np.empty((n + 1, d, d))
    run_mean = np.empty(n + 1)
    states = []
    zeros_w = np.zeros(cfg.N)
    A = None
    ent_frozen = 0.0
    for i in range(n):
        c = slices[i]
        mubar, cov = conditional_moments(X)
        means[i], covs[i], run_mean[i] = mubar, cov, running.mean()
        if cfg.keep_states:
            states.append(X.copy())
        shift = (Kbar[i] - K[i]) @ mubar + K0[i]
        extra = None
        if relaxed:
            A = kernels.gaussian_actions(X, np.zeros((cfg.N, p)), K[i], shift, np.zeros((p, p)))
            ent_step = gaussian_entropy(Sigma[i])
            reward_add = float(np.trace(c.R @ Sigma[i]))
            std_s = sym_sqrt(c.F @ Sigma[i] @ c.F.T, name="cov(sigma)")
            std_o = sym_sqrt(c.Fo @ Sigma[i] @ c.Fo.T, name="cov(sigma_o)")
            if np.any(std_s):
                extra = noise.increments(i, WBAR, (cfg.N, d), dt) @ std_s.T
            if np.any(std_o):
                eo = noise.increments(i, BBAR, (cfg.N, d), dt) @ std_o.T
                extra = eo if extra is None else extra + eo
        else:
            if mask[i]:
                Z = noise.normals(i, ACTION, (cfg.N, p))
                A = kernels.gaussian_actions(X, Z, K[i], shift, np.linalg.cholesky(Sigma[i]))
                ent_frozen = gaussian_entropy(Sigma[i])
            ent_step = ent_frozen
            reward_add = 0.0
        dW = noise.increments(i, W, cfg.N, dt) if need_w else zeros_w
        dB = float(noise.increments(i, B, 1, dt)[0]) if need_b else 0.0
        B_path[i + 1] = B_path[i] + dB
        reward_c = float(mubar @ c.Mbar @ mubar) + reward_add
        X = kernels.lq_euler_step(
            X, np.ascontiguousarray(A), dW, dB, extra,
            c.b0 + c.Bbar @ mubar, c.B, c.C,
            c.theta + c.Dbar @ mubar, c.D, c.F,
            c.theta_o + c.Dbar_o @ mubar, c.Do, c.Fo,
            c.M, c.R, c.O, reward_c, dt, running,
        )
        ent_total += model.gamma * ent_step * dt
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"non-finite particle state at step {i + 1}", t=float(times[i + 1]), step=i + 1)
    mubar, cov = conditional_moments(X)
    means[n], covs[n], run_mean[n] = mubar, cov, running.mean()
    if cfg.keep_states:
        states.append(X.copy())
    terminal = np.einsum("ni,ij,nj->n", X, model.P, X) + mubar @ model.Pbar @ mubar
    final = ParticleEnsemble(float(model.horizon), X, running, ent_total, B_path)
    return Trajectory(times, means, covs, run_mean, final, terminal, states)


def simulate_sampled(model: LQModel, policy: GaussianPolicy, config: SimConfig) -> Trajectory:
    """Euler scheme with actions drawn at action-grid nodes and frozen in between.

    The entropy bonus is frozen at the node as well; rewards use the left
    point of each simulation step.
    """
    return _simulate(model, policy, config, relaxed=False)


def simulate_relaxed(model: LQModel, policy: GaussianPolicy, config: SimConfig) -> Trajectory:
    """Euler scheme for the dynamics driven by policy moments plus auxiliary noises."""
    return _simulate(model, policy, config, relaxed=True)
