"""Command-line front end: solve, perturb, generate, profile, info.

Exit codes: 0 success (non-convergence included), 2 usage or parse errors,
3 invalid input problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bal import read_bal, write_bal, write_bal_params
from .bench import (CostCurve, ProfileInput, PerturbSpec, SyntheticSpec,
                    generate_synthetic, perturb, profile_rows)
from .clustering import build_camera_graph, cluster_stochastic
from .errors import BalParseError, InfeasibleSpec, InvalidProblem
from .lm import SolverConfig
from .stochastic import minimize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID_PROBLEM = 3

SOLVER_NAMES = ("lm-dense", "lm-pcg", "stba", "stba-fixed")


def _positive_gamma(text: str) -> float:
    value = float(text)
    if not value >= 1:
        raise argparse.ArgumentTypeError("gamma must be >= 1 (or inf)")
    return value


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=SOLVER_NAMES, default="stba",
                   help="solver variant (default: stba)")
    p.add_argument("--max-iters", type=int, default=100,
                   help="iteration cap (default: 100)")
    p.add_argument("--lambda0", type=float, default=1e-4,
                   help="initial damping (default: 1e-4)")
    p.add_argument("--huber", type=float, default=0.5,
                   help="Huber scale in pixels, inf disables (default: 0.5)")
    p.add_argument("--gamma", type=_positive_gamma, default=100.0,
                   help="max cluster size, inf for one cluster (default: 100)")
    p.add_argument("--beta", type=float, default=10.0,
                   help="merge-sampling softmax scale (default: 10)")
    p.add_argument("--seed", type=int, default=0,
                   help="random seed (default: 0)")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel cluster solves; falls back to env "
                        "STBA_WORKERS, then 1")
    p.add_argument("--tol", type=float, default=1e-6,
                   help="cost/gradient/parameter tolerance (default: 1e-6)")
    p.add_argument("--mode", choices=("stochastic", "fixed"), default="stochastic",
                   help="redraw clustering each iteration or reuse the first "
                        "(default: stochastic)")


def _resolve_workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("STBA_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(EXIT_USAGE)
    return 1


def _config_from_args(args) -> SolverConfig:
    solver = args.solver
    mode = args.mode
    if solver == "stba-fixed":
        mode = "fixed"
    gamma = args.gamma
    if float(gamma).is_integer() and np.isfinite(gamma):
        gamma = int(gamma)
    return SolverConfig(solver=solver, max_iterations=args.max_iters,
                        lambda0=args.lambda0, huber_delta=args.huber,
                        gamma=gamma, beta=args.beta, seed=args.seed,
                        workers=_resolve_workers(args), tolerance=args.tol,
                        mode=mode)


def cmd_solve(args) -> int:
    problem = read_bal(args.problem, keep_largest_component=args.keep_largest)
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    x, trace = minimize(problem, config)
    wall_ms = (time.perf_counter() - t0) * 1e3

    trace.write_csv(out / "trace.csv", include_timings=args.timings)
    write_bal_params(problem, x, out / "final.bal")
    summary = {
        "schema": 1,
        "solver": config.solver,
        "seed": config.seed,
        "initial_cost": trace.initial_cost,
        "final_cost": trace.final_cost,
        "iterations": trace.iterations,
        "accepted_steps": sum(1 for r in trace.records if r.accepted),
        "termination": trace.termination,
        "total_time_ms": wall_ms,
        "degenerate_observations": sum(r.n_degenerate for r in trace.records),
        "dropped_split_observations": sum(r.n_dropped_split for r in trace.records),
        "ingest": vars(problem.ingest),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{config.solver}: cost {trace.initial_cost:.6g} -> {trace.final_cost:.6g} "
          f"in {trace.iterations} iterations ({trace.termination})")
    return EXIT_OK


def cmd_perturb(args) -> int:
    problem = read_bal(args.problem, keep_largest_component=args.keep_largest)
    spec = PerturbSpec(sigma_points=args.sigma_points,
                       sigma_camera_centers=args.sigma_centers, seed=args.seed)
    write_bal(perturb(problem, spec), args.output)
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = SyntheticSpec(cameras=args.cameras, points=args.points,
                         layout=args.layout, views=args.views,
                         pixel_noise=args.pixel_noise, seed=args.seed,
                         focal=args.focal)
    write_bal(generate_synthetic(spec), args.output)
    return EXIT_OK


def cmd_info(args) -> int:
    problem = read_bal(args.problem, keep_largest_component=args.keep_largest)
    print(f"cameras      {problem.num_cameras}")
    print(f"points       {problem.num_points}")
    print(f"observations {problem.num_observations}")
    graph = build_camera_graph(problem)
    print(f"camera graph edges {graph.num_edges}")
    if np.isinf(args.gamma):
        print("clusters     1 (gamma = inf)")
    else:
        rng = np.random.default_rng([args.seed, 1])
        assignment = cluster_stochastic(graph, args.gamma, args.beta, rng)
        print(f"clusters     {assignment.num_clusters} "
              f"(gamma {args.gamma:g}, beta {args.beta:g}, seed {args.seed}, "
              f"max size {assignment.max_size})")
    return EXIT_OK


def cmd_profile(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    problems = manifest["problems"]
    solver_entries = manifest["solvers"]
    taus = manifest.get("taus", [0.1, 0.01, 0.001])
    alphas = manifest.get("alphas", [1, 2, 4, 8, 16])
    base = manifest.get("config", {})

    names = [entry["name"] for entry in solver_entries]
    if len(set(names)) != len(names):
        raise SystemExit(EXIT_USAGE)
    inputs = ProfileInput(problems=[str(p) for p in problems], solvers=names)
    # jobs run one at a time so wall-clock measurements are not contended
    for ppath in problems:
        problem = read_bal(ppath, keep_largest_component=args.keep_largest)
        for entry in solver_entries:
            overrides = {**base, **{k: v for k, v in entry.items() if k != "name"}}
            config = SolverConfig(**overrides)
            _, trace = minimize(problem, config)
            inputs.add(str(ppath), entry["name"], CostCurve.from_trace(trace))

    rows = profile_rows(inputs, taus, alphas)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["solver,tau,alpha,rho"]
    lines += [f"{s},{tau!r},{alpha!r},{rho!r}" for s, tau, alpha, rho in rows]
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} profile rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stba",
        description="Bundle adjustment with a stochastically clustered "
                    "reduced camera system")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="minimize reprojection error on a BAL problem")
    p.add_argument("problem", help="input BAL file")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    p.add_argument("--timings", action="store_true",
                   help="write measured wall-clock columns into trace.csv "
                        "(off by default so repeated runs are byte-identical)")
    p.add_argument("--keep-largest", action="store_true",
                   help="keep the largest connected component instead of "
                        "rejecting disconnected inputs")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("perturb", help="add Gaussian noise to points and camera centers")
    p.add_argument("problem")
    p.add_argument("output")
    p.add_argument("--sigma-points", type=float, default=0.0,
                   help="point noise stddev, world units (default: 0)")
    p.add_argument("--sigma-centers", type=float, default=0.0,
                   help="camera center noise stddev, world units (default: 0)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--keep-largest", action="store_true")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("generate", help="write a synthetic BAL problem")
    p.add_argument("output")
    p.add_argument("--cameras", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--layout", choices=("ring", "grid-street"), default="ring",
                   help="scene layout (default: ring)")
    p.add_argument("--views", type=int, default=6,
                   help="observing cameras per point (default: 6)")
    p.add_argument("--pixel-noise", type=float, default=0.0,
                   help="observation noise stddev in pixels (default: 0)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--focal", type=float, default=1000.0,
                   help="focal length in pixels (default: 1000)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("info", help="print problem sizes and a sample cluster count")
    p.add_argument("problem")
    p.add_argument("--gamma", type=_positive_gamma, default=100.0,
                   help="max cluster size (default: 100)")
    p.add_argument("--beta", type=float, default=10.0,
                   help="softmax scale (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--keep-largest", action="store_true")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("profile", help="run a bake-off manifest and write rho(s, alpha) rows")
    p.add_argument("manifest", help="JSON file listing problems, solvers, taus, alphas")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--keep-largest", action="store_true")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_PROBLEM
    except (BalParseError, InfeasibleSpec, ValueError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
