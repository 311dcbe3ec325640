"""Command-line entry point: ``mfcq <command> --model FILE [options]``.

Exit codes: 0 success, 2 configuration error (including condition (H)
unless --force), 3 numerical failure, 4 invariant violation, 5 inconclusive
study. Every run writes ``manifest.json`` next to its outputs; replay with
``mfcq --from-manifest manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from mfcq import __version__
from mfcq.errors import (
    ConditionHError,
    DefinitenessError,
    DegenerateMapError,
    DivergenceError,
    InvariantViolation,
    ModelConfigError,
    SingularityError,
    StudyInconclusive,
    TimeRangeError,
)
from mfcq.measure import MeasureSlice
from mfcq.model import load_model, validate_condition_H

OUTPUT_ENV = "MFCQ_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT, EXIT_INCONCLUSIVE = 0, 2, 3, 4, 5


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model document (YAML/JSON)")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ENV} or ./mfcq-out)")
    p.add_argument("--force", action="store_true", help="proceed when condition (H) fails")
    p.add_argument("--delta", type=float, default=1e-8, help="margin for R <= -delta I (default 1e-8)")
    p.add_argument("--steps", type=int, default=1000, help="RK4 steps on [0, T] (default 1000)")
    p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it (default 1)")


def _sim_knobs(p: argparse.ArgumentParser, N=10_000, dt=0.01, reps=50) -> None:
    p.add_argument("--N", type=int, default=N, help=f"particles per replication (default {N})")
    p.add_argument("--dt-sim", type=float, default=dt, help=f"simulation step (default {dt})")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--replications", type=int, default=reps, help=f"Monte Carlo replications (default {reps})")
    p.add_argument("--mu0-mean", type=_floats, default=None, help="initial mean, comma separated (default 0)")
    p.add_argument("--mu0-cov", type=_floats, default=None,
                   help="initial covariance, row-major comma separated (default 0: point mass)")


def _policy_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma-scale", type=float, default=1.0, help="multiply the optimal Sigma (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfcq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mfcq {__version__}")
    parser.add_argument("--from-manifest", default=None, help="replay the run recorded in a manifest")
    parser.add_argument("--replay-out", default=None, help="output directory for a replayed run")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("solve", help="solve the Riccati system; writes riccati.csv and condition_h.json")
    _common(p)

    p = sub.add_parser("policy", help="optimal Gaussian policy; writes policy.csv")
    _common(p)
    _policy_knobs(p)

    p = sub.add_parser("simulate", help="one particle replication; writes trajectory.csv")
    _common(p)
    _policy_knobs(p)
    _sim_knobs(p, reps=1)
    p.add_argument("--mode", choices=("sampled", "relaxed"), default="sampled")
    p.add_argument("--action-grid", default=None,
                   help="uniform interval count or comma-separated times (default: every step)")
    p.add_argument("--replication", type=int, default=0, help="replication index (default 0)")

    p = sub.add_parser("fixed-point", help="two-layer iteration; writes trace.csv and policy.csv")
    _common(p)
    p.add_argument("--init", type=_floats, default=[0.0, 0.0, 0.0, 1.0],
                   help="constant initial K,Kbar,K0,Sigma for d=p=1 (default 0,0,0,1)")
    p.add_argument("--tol", type=float, default=1e-10, help="outer tolerance (default 1e-10)")
    p.add_argument("--max-outer", type=int, default=50, help="outer iteration cap (default 50)")
    p.add_argument("--spot-check", action="store_true", help="cross-check the last step with the tabular inner solve")
    p.add_argument("--cells", type=int, default=257, help="action cells for the tabular solve (default 257)")
    p.add_argument("--damping", type=float, default=0.5, help="inner damping theta (default 0.5)")

    p = sub.add_parser("convergence", help="action-grid rate study; writes study.csv and report.json")
    _common(p)
    _policy_knobs(p)
    _sim_knobs(p, dt=0.025, reps=100)
    p.add_argument("--grids", type=_floats, default=[0.2, 0.1, 0.05, 0.025], help="action meshes")
    p.add_argument("--independent", action="store_true", help="independent noise per grid instead of CRN")
    p.add_argument("--probe-doubling", action="store_true", help="rerun the finest grid with 2N")

    p = sub.add_parser("improve", help="policy-improvement check; writes improvement.json")
    _common(p)
    _sim_knobs(p, N=5000, reps=40)
    p.add_argument("--perturb", type=float, default=0.2, help="std of the random block perturbation (default 0.2)")
    p.add_argument("--no-mc", action="store_true", help="closed form only")

    p = sub.add_parser("hjb-check", help="HJB residual sweep; writes hjb.csv")
    _common(p)
    p.add_argument("--times", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0], help="fractions of T")
    p.add_argument("--mu-mean", type=_floats, default=None, help="measure mean (default 0)")
    p.add_argument("--mu-cov", type=_floats, default=None, help="measure covariance (default I)")
    p.add_argument("--order", type=int, default=20, help="Gauss-Hermite order per axis (default 20)")
    return parser


def _measure(d: int, mean, cov, default_cov) -> MeasureSlice:
    m = np.zeros(d) if mean is None else np.asarray(mean, float)
    c = default_cov(d) if cov is None else np.asarray(cov, float).reshape(d, d)
    return MeasureSlice.gaussian(m, c)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "mfcq-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _optimal(model, args):
    from mfcq.riccati import optimal_policy, solve_backward

    sol = solve_backward(model, args.steps, check="skip")
    pol = optimal_policy(sol, model)
    if getattr(args, "sigma_scale", 1.0) != 1.0:
        pol = pol.with_blocks(Sigma=pol.Sigma * args.sigma_scale)
    return sol, pol


def _run(args, model, out: Path) -> tuple[int, list[str], dict]:
    from mfcq import fixed_point, hamiltonian, mc_eval, particles
    from mfcq.policy import GaussianPolicy

    files: list[str] = []
    summary: dict = {}
    cmd = args.command
    if cmd == "solve":
        from mfcq.riccati import solve_backward

        sol = solve_backward(model, args.steps, check="skip")
        sol.to_csv(out / "riccati.csv")
        files.append("riccati.csv")
        summary = {"Lambda0": sol.Lambda[0].tolist(), "Gamma0": sol.Gamma[0].tolist(),
                   "zeta0": sol.zeta[0].tolist(), "chi0": float(sol.chi[0])}
    elif cmd == "policy":
        _, pol = _optimal(model, args)
        pol.to_csv(out / "policy.csv")
        files.append("policy.csv")
    elif cmd == "simulate":
        _, pol = _optimal(model, args)
        grid = None
        if args.action_grid:
            grid = int(args.action_grid) if args.action_grid.isdigit() else _floats(args.action_grid)
        mu0 = _measure(model.d, args.mu0_mean, args.mu0_cov, lambda d: np.zeros((d, d)))
        cfg = particles.SimConfig(N=args.N, dt_sim=args.dt_sim, action_grid=grid, seed=args.seed,
                                  replication=args.replication, mu0=mu0)
        sim = particles.simulate_sampled if args.mode == "sampled" else particles.simulate_relaxed
        tr = sim(model, pol, cfg)
        tr.to_csv(out / "trajectory.csv")
        files.append("trajectory.csv")
        summary = {"value": tr.value, "running": tr.running, "entropy": tr.entropy, "terminal": tr.terminal_mean}
    elif cmd == "fixed-point":
        if len(args.init) != 4 or model.d != 1 or model.p != 1:
            raise ModelConfigError("--init takes K,Kbar,K0,Sigma and needs d = p = 1")
        pi0 = GaussianPolicy.constant(model.horizon, *args.init)
        pol, trace = fixed_point.two_layer_solve(model, pi0, args.tol, args.max_outer, args.steps)
        trace.to_csv(out / "trace.csv")
        pol.to_csv(out / "policy.csv")
        files += ["trace.csv", "policy.csv"]
        summary = {"converged": trace.converged, "iterations": trace.iterations, "values": trace.values}
        if args.spot_check:
            step = fixed_point.outer_iterate(model, pol, args.steps, spot_checks=[(0.0, MeasureSlice.standard(model.d))],
                                             cells=args.cells, damping=args.damping)
            summary["spot_error"] = step.spot_errors[0]
        if not trace.converged:
            _write_json(out / "summary.json", summary)
            files.append("summary.json")
            return EXIT_NUMERIC, files, summary
    elif cmd == "convergence":
        _, pol = _optimal(model, args)
        mu0 = _measure(model.d, args.mu0_mean, args.mu0_cov, lambda d: np.zeros((d, d)))
        cfg = particles.SimConfig(N=args.N, dt_sim=args.dt_sim, seed=args.seed, mu0=mu0)
        study = mc_eval.convergence_study(model, pol, args.grids, cfg, args.replications,
                                          common_random_numbers=not args.independent,
                                          probe_doubling=args.probe_doubling)
        study.to_csv(out / "study.csv")
        study.to_json(out / "report.json")
        files += ["study.csv", "report.json"]
        summary = {"slope": study.slope, "monotone": study.monotone, "inconclusive": study.inconclusive}
        if study.inconclusive:
            return EXIT_INCONCLUSIVE, files, summary
    elif cmd == "improve":
        sol, pol = _optimal(model, args)
        rng = np.random.default_rng(args.seed)
        e = rng.normal(0.0, args.perturb, size=3)
        pert = pol.with_blocks(K=pol.K + e[0], Kbar=pol.Kbar + e[1], K0=pol.K0 + e[2])
        mu0 = _measure(model.d, args.mu0_mean, args.mu0_cov, np.eye)
        cfg = None if args.no_mc else particles.SimConfig(N=args.N, dt_sim=args.dt_sim, seed=args.seed, mu0=mu0)
        rep = mc_eval.improvement_check(model, pert, cfg, args.replications, mu0, args.steps)
        rep.to_json(out / "improvement.json")
        files.append("improvement.json")
        summary = {"gap": rep.gap, "mc_gap": rep.mc_gap, "mc_stderr": rep.mc_stderr}
    elif cmd == "hjb-check":
        from mfcq.riccati import solve_backward

        sol = solve_backward(model, args.steps, check="skip")
        mu = _measure(model.d, args.mu_mean, args.mu_cov, np.eye)
        rows = hamiltonian.hjb_sweep(model, sol, [f * model.horizon for f in args.times], [mu],
                                     out / "hjb.csv", args.order)
        files.append("hjb.csv")
        summary = {"max_abs_residual": max(abs(r[3]) for r in rows)}
    return EXIT_OK, files, summary


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _manifest_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("from_manifest", "replay_out")}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    model_text = None
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            man = json.load(fh)
        replay = argparse.Namespace(**man["args"])
        if args.replay_out:
            replay.out = args.replay_out
        args, model_text = replay, man["model_text"]
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        if model_text is None:
            model_text = Path(args.model).read_text()
        model = load_model(model_text)
        out = _out_dir(args)
        report = validate_condition_H(model, args.delta)
        if args.command == "solve":
            _write_json(out / "condition_h.json", {
                "holds": report.holds, "violations": list(report.violations),
                "max_eigenvalues": report.max_eigenvalues, "margins": report.margins, "delta": report.delta_used,
            })
        if not report.holds and not args.force:
            raise ConditionHError(report)
        code, files, summary = _run(args, model, out)
    except (ModelConfigError, ConditionHError, TimeRangeError, OSError, ValueError) as exc:
        print(f"mfcq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularityError, DivergenceError, DefinitenessError, DegenerateMapError, np.linalg.LinAlgError) as exc:
        print(f"mfcq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"mfcq: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except StudyInconclusive as exc:
        print(f"mfcq: inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    if args.command == "solve":
        files.insert(0, "condition_h.json")
    manifest = {
        "command": args.command,
        "args": _manifest_args(args),
        "model_text": model_text,
        "model_sha256": hashlib.sha256(model_text.encode()).hexdigest(),
        "version": __version__,
        "outputs": files,
        "exit_code": code,
        "summary": summary,
        "duration_s": round(time.perf_counter() - start, 3),
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"exit": code, "out": str(out), **summary}, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
