"""Compare the compiled and NumPy simulation kernels.

    python benchmarks/bench_kernels.py [--N 10000 100000] [--repeat 20]

Prints per-call timings of the Euler step and the action sampler, then the
wall time of one full sampled-action replication on each backend, and checks
that both backends produce the same trajectory.
"""

import argparse
import time

import numpy as np

import mfcq.particles as particles
from mfcq.kernels import get_backend
from mfcq.model import LQModel
from mfcq.policy import GaussianPolicy


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_step(backend, N, d, p, repeat):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((N, d))
    A = rng.standard_normal((N, p))
    dW = rng.standard_normal(N) * 0.1
    mat = lambda r, c: rng.standard_normal((r, c)) * 0.1  # noqa: E731
    vec = lambda r: rng.standard_normal(r) * 0.1  # noqa: E731
    reward = np.zeros(N)
    args = (X, A, dW, 0.05, None, vec(d), mat(d, d), mat(d, p), vec(d), mat(d, d), mat(d, p),
            vec(d), mat(d, d), mat(d, p), -np.eye(d), -np.eye(p), vec(d), 0.0, 0.01, reward)
    step = _time(lambda: backend.lq_euler_step(*args), repeat)
    Z = rng.standard_normal((N, p))
    act = _time(lambda: backend.gaussian_actions(X, Z, mat(p, d), vec(p), np.eye(p)), repeat)
    return step, act


def bench_replication(name, N):
    backend = get_backend(name)
    saved = particles.kernels.lq_euler_step, particles.kernels.gaussian_actions
    particles.kernels.lq_euler_step = backend.lq_euler_step
    particles.kernels.gaussian_actions = backend.gaussian_actions
    try:
        model = LQModel.build(1, 1, 1.0, 1.0, C=1.0, R=-0.5, P=-0.5, Fo=0.5, theta=0.2, D=0.1)
        pol = GaussianPolicy.constant(1.0, -0.5, -0.5, 0.0, 1.0)
        cfg = particles.SimConfig(N=N, dt_sim=0.01, action_grid=100, seed=3)
        t0 = time.perf_counter()
        tr = particles.simulate_sampled(model, pol, cfg)
        return time.perf_counter() - t0, tr.final.X
    finally:
        particles.kernels.lq_euler_step, particles.kernels.gaussian_actions = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[10_000, 100_000])
    ap.add_argument("--d", type=int, default=1)
    ap.add_argument("--p", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    print(f"{'N':>8} {'kernel':>14} {'python [ms]':>12} {'compiled [ms]':>14} {'speedup':>8}")
    for N in args.N:
        py = bench_step(get_backend("python"), N, args.d, args.p, args.repeat)
        cy = bench_step(get_backend("compiled"), N, args.d, args.p, args.repeat)
        for label, a, b in (("euler_step", py[0], cy[0]), ("actions", py[1], cy[1])):
            print(f"{N:>8} {label:>14} {1e3 * a:>12.3f} {1e3 * b:>14.3f} {a / b:>8.2f}")
    for N in args.N:
        t_py, x_py = bench_replication("python", N)
        t_cy, x_cy = bench_replication("compiled", N)
        diff = float(np.max(np.abs(x_py - x_cy)))
        print(f"{N:>8} {'replication':>14} {1e3 * t_py:>12.1f} {1e3 * t_cy:>14.1f} {t_py / t_cy:>8.2f}"
              f"   max |dX| = {diff:.1e}")


if __name__ == "__main__":
    main()
