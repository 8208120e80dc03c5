"""Command-line interface: ``solve``, ``compare``, ``project`` and ``formulas``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .core import Box, BoxFamily, OrderingFamily, ProblemMetadata, gamma_for_known_family
from .distribution import staleness_bound
from .projections import project_ordering
from .solvers import (
    ALGORITHMS,
    SolverConfig,
    recommended_eta_full,
    recommended_eta_light,
    recommended_k,
    schedule_from_tau,
    solve,
)

SEED_ENV = "HEAVYTOUCH_SEED"
PROBLEMS = ("ordering", "ranking", "boxqp", "toy-linear", "toy-quadratic")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_problem_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("problem")
    g.add_argument("--problem", choices=PROBLEMS, default="ordering")
    g.add_argument("--d", type=int, default=16, help="dimension")
    g.add_argument("--n", type=int, default=1000, help="training examples")
    g.add_argument("--pairs", choices=("chain", "grid"), default="chain", help="ranking pair structure")
    g.add_argument("--sparsity", type=int, default=4, help="nonzeros per ranking example")
    g.add_argument("--noise", type=float, default=0.1, help="ordering regression noise sd")
    g.add_argument("--condition", type=float, default=10.0, help="box QP condition number")
    g.add_argument("--problem-seed", type=int, default=0, help="seed for the generated data")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--T", type=int, default=1000)
    g.add_argument("--T1", type=int)
    g.add_argument("--T2", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--eta-w", type=float)
    g.add_argument("--eta-p", type=float)
    g.add_argument("--gamma", type=float, help="default: known-family or interior-point estimate")
    g.add_argument("--k", type=int, default=0, help="LightTouch subset size; 0 uses the formula")
    g.add_argument("--k-f", type=int, default=1)
    g.add_argument("--delta", type=float, default=0.1)
    g.add_argument("--schedule", choices=("constant", "inv_sqrt", "inv_t"))
    g.add_argument("--schedule-lambda", type=float)
    g.add_argument("--aggregate", type=int)
    g.add_argument("--no-final-projection", action="store_true")
    g.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    g.add_argument("--seed", type=int, help=f"falls back to ${SEED_ENV}, then 0")
    g.add_argument("--trace-every", type=int, default=0)
    g.add_argument("--config", help="JSON file of flag values; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heavytouch", description="Constrained SGD with few constraint checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="run one solver and print a summary")
    p.add_argument("--solver", choices=ALGORITHMS, default="full")
    _add_problem_flags(p)
    _add_solver_flags(p)
    p.add_argument("--out", help="write the trace CSV here")

    p = sub.add_parser("compare", help="run several solvers with repetitions and write CSVs")
    p.add_argument("--solver", default="full,light", help="comma-separated algorithms")
    _add_problem_flags(p)
    _add_solver_flags(p)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("project", help="project a vector onto w_1 <= ... <= w_d")
    p.add_argument("input", help="file of whitespace-separated numbers ('-' for stdin)")
    p.add_argument("--out", help="output file (default stdout)")

    p = sub.add_parser("formulas", help="print recommended hyperparameters")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--k", type=int, help="subset size for the staleness bound (default: recommended)")
    p.add_argument("--d", type=int, help="dimension for known-family gamma values")
    p.add_argument("--tau", type=float, help="also print the two-phase schedule")
    p.add_argument("--L-f", type=float, default=1.0)
    p.add_argument("--L-g", type=float, default=1.0)
    p.add_argument("--G-f", type=float, default=1.0)
    p.add_argument("--G-g", type=float, default=1.0)
    p.add_argument("--D", type=float, default=1.0, help="domain diameter bound")
    p.add_argument("--gamma", type=float, default=1.0, help="gamma used in the step-size formulas")
    return parser


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        values = json.loads(Path(path).read_text())
    except OSError as exc:
        raise RuntimeError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    known = vars(args)
    defaults = {}
    for key, value in values.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise UsageError(f"unknown config key {key!r}")
        defaults[dest] = value
    # reparse so explicit flags override file values
    subparser = _subparser(parser, args.command)
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None


def _generator(args) -> bench.GeneratorSpec:
    kinds = {
        "ordering": lambda: bench.OrderingRegression(args.d, args.n, args.noise),
        "ranking": lambda: bench.MonotonicRanking(args.d, args.n, args.sparsity, args.pairs),
        "boxqp": lambda: bench.BoxQP(args.d, args.condition),
        "toy-linear": bench.ToyLinear,
        "toy-quadratic": bench.ToyQuadratic,
    }
    return bench.GeneratorSpec(kinds[args.problem](), args.problem_seed)


def _config(args, algorithm: str) -> SolverConfig:
    try:
        return SolverConfig(
            algorithm=algorithm,
            T=args.T,
            T1=args.T1,
            T2=args.T2,
            tau=args.tau,
            eta_w=args.eta_w,
            eta_p=args.eta_p,
            gamma=args.gamma,
            k=args.k,
            k_f=args.k_f,
            delta=args.delta,
            step_schedule=args.schedule,
            schedule_lambda=args.schedule_lambda,
            final_projection=not args.no_final_projection,
            seed=_seed(args),
            trace_every=args.trace_every,
            aggregate=args.aggregate,
            clock=args.clock,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_solve(args, out) -> None:
    config = _config(args, args.solver)
    problem = bench.generate(_generator(args))
    result = solve(problem, config)
    print(f"problem            {problem.name}", file=out)
    print(f"algorithm          {result.algorithm}", file=out)
    print(f"gamma              {result.gamma:.6g}", file=out)
    print(f"final_objective    {result.final_objective:.10g}", file=out)
    print(f"final_violation    {result.final_violation:.3g}", file=out)
    print(f"constraint_checks  {result.total_constraint_checks}", file=out)
    print(f"objective_samples  {result.total_objective_samples}", file=out)
    print(f"wall_time_s        {result.wall_time:.3f}", file=out)
    for w in result.warnings:
        print(f"warning            {w}", file=out)
    if args.out:
        bench.write_trace(args.out, result)


def _cmd_compare(args, out) -> None:
    algorithms = [a.strip() for a in args.solver.split(",") if a.strip()]
    for a in algorithms:
        if a not in ALGORITHMS:
            raise UsageError(f"unknown solver {a!r}; choose from {', '.join(ALGORITHMS)}")
    try:
        plan = bench.ExperimentPlan(
            problem=_generator(args),
            runs=[(_config(args, a), a) for a in algorithms],
            repetitions=args.reps,
            output_path=args.out,
            jobs=args.jobs,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    summary = bench.run_experiment(plan)
    print(f"{'label':<15}{'objective':>16}{'violation':>12}{'checks':>14}", file=out)
    for label, s in summary.labels.items():
        print(
            f"{label:<15}{s.mean_objective:>16.8g}{max(s.final_violation):>12.3g}{s.mean_checks:>14.0f}",
            file=out,
        )
    print(f"wrote {len(summary.files)} files to {args.out}", file=out)


def _cmd_project(args, out) -> None:
    try:
        text = sys.stdin.read() if args.input == "-" else Path(args.input).read_text()
    except OSError as exc:
        raise RuntimeError(f"cannot read {args.input}: {exc}") from exc
    try:
        w = np.array([float(tok) for tok in text.split()])
    except ValueError as exc:
        raise RuntimeError(f"{args.input}: not a list of numbers ({exc})") from exc
    if w.size == 0:
        raise RuntimeError(f"{args.input}: empty vector")
    line = " ".join("%.17g" % x for x in project_ordering(w)) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(line)
        except OSError as exc:
            raise RuntimeError(f"cannot write {args.out}: {exc}") from exc
    else:
        out.write(line)


def _cmd_formulas(args, out) -> None:
    m, T, delta = args.m, args.T, args.delta
    if not (m >= 1 and T >= 1 and 0 < delta < 1):
        raise UsageError("formulas need m >= 1, T >= 1 and delta in (0, 1)")
    k = recommended_k(m, T, delta)
    print(f"k={k}", file=out)
    print(f"staleness_bound={staleness_bound(m, args.k or k, int(math.ceil(T)), delta):.6g}", file=out)
    meta = ProblemMetadata(L_f=args.L_f, L_g=args.L_g, G_f=args.G_f, G_g=args.G_g)
    domain = _diameter_domain(args.D)
    print(f"eta_light={recommended_eta_light(meta, domain, m, T, args.gamma):.6g}", file=out)
    print(f"eta_full={recommended_eta_full(meta, domain, T, args.gamma):.6g}", file=out)
    if args.d:
        print(f"gamma_box={gamma_for_known_family(BoxFamily(args.d), args.L_f).gamma:.6g}", file=out)
        if args.d >= 2:
            g = gamma_for_known_family(OrderingFamily(args.d), args.L_f).gamma
            print(f"gamma_ordering={g:.6g}", file=out)
    if args.tau is not None:
        T1, T2 = schedule_from_tau(args.tau, m)
        print(f"T1={T1}", file=out)
        print(f"T2={T2}", file=out)


def _diameter_domain(D: float) -> Box:
    if not D > 0:
        raise UsageError("--D must be positive")
    # any domain whose diameter bound is D works for the step-size formulas
    return Box(np.zeros(1), np.full(1, D), diameter=max(1.0, D))


COMMANDS = {
    "solve": _cmd_solve,
    "compare": _cmd_compare,
    "project": _cmd_project,
    "formulas": _cmd_formulas,
}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        COMMANDS[args.command](args, out)
    except SystemExit as exc:
        # --help and friends
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError, ArithmeticError) as exc:
        print(f"heavytouch: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
