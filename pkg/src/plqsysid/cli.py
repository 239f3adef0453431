"""Command-line entry points: ``identify``, ``montecarlo`` and ``penalty-eval``.

Exit codes: 0 success, 2 bad input or configuration, 3 problem validation
failure, 4 solver failure or non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench
from .errors import (
    DataError,
    DimensionError,
    FactorizationError,
    InvalidParameterError,
    RankDeficiencyError,
    UnboundedPenaltyError,
    ValidationError,
)
from .estimator import (
    ALPHA_GRID,
    build_regressor,
    cv_tune_plq,
    estimate_ss_l2,
    fit_hyperparameters_ml,
    fit_ss_plq,
    gamma_grid_around,
    marginal_likelihood_objective,
)
from .plq import PENALTY_NAMES, evaluate, make_penalty
from .solver import SolverOptions

EXIT_OK, EXIT_INPUT, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def fmt(x) -> str:
    """Decimal text with 17 significant digits (round-trips a double)."""
    return format(float(x), ".17g")


# -- argument helpers -----------------------------------------------------------------


def key_value(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"parameter {key!r} needs a number, got {value!r}")


def float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def name_list(text: str) -> tuple:
    return tuple(v for v in text.replace(",", " ").split())


def tuning(*modes):
    def parse(text: str):
        if text in modes:
            return text
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number or one of {modes}, got {text!r}")
        if not (v > 0 and math.isfinite(v)):
            raise argparse.ArgumentTypeError(f"value must be positive, got {text!r}")
        return v
    return parse


def value_grid(text: str) -> np.ndarray:
    """``lo:hi:num`` for a uniform grid, or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, num = text.split(":")
            return np.linspace(float(lo), float(hi), int(num))
        return np.array(float_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:num or a list, got {text!r}")


def _solver_args(p):
    g = p.add_argument_group("solver")
    g.add_argument("--tol", type=float, default=1e-8, help="KKT residual tolerance")
    g.add_argument("--max-iter", type=int, default=200, help="Newton iteration limit")
    g.add_argument("--sigma", type=float, default=0.1, help="barrier reduction factor")
    g.add_argument("--tau", type=float, default=0.995, help="fraction-to-boundary factor")
    g.add_argument("--verbose", action="store_true", default=False,
                   help="print per-iteration solver diagnostics to stderr")


def _loss_args(p, default_loss):
    p.add_argument("--loss", choices=PENALTY_NAMES, default=default_loss, help="loss penalty")
    p.add_argument("--loss-param", type=key_value, action="append", default=[],
                   metavar="K=V", help="loss parameter (kappa, epsilon, lam); repeatable")


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="plqsysid", formatter_class=fmt_cls,
        description="Robust impulse-response identification with PLQ losses and "
                    "stable spline regularization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", formatter_class=fmt_cls,
                       help="estimate an impulse response from a (u, y) CSV")
    p.add_argument("--config", type=Path, default=None, help="key=value file of option defaults")
    p.add_argument("--input", type=Path, default=None, help="CSV with header columns u and y")
    p.add_argument("--output-dir", type=Path, default=Path("."),
                   help="directory for estimate.csv and summary.json")
    p.add_argument("--n", type=int, default=100, help="impulse-response length")
    p.add_argument("--delay", type=int, default=1, help="input delay in samples")
    _loss_args(p, "l1")
    p.add_argument("--reg", choices=PENALTY_NAMES, default="l2", help="regularizer penalty")
    p.add_argument("--reg-param", type=key_value, action="append", default=[], metavar="K=V",
                   help="regularizer parameter; repeatable")
    p.add_argument("--gamma", type=tuning("auto", "ml", "cv"), default="auto",
                   help="regularization weight, or ml / cv tuning (auto: ml for l2 loss, "
                        "cv otherwise)")
    p.add_argument("--alpha", type=tuning("auto", "ml", "cv"), default="auto",
                   help="kernel decay rate in (0, 1), or ml / cv tuning (auto follows --gamma)")
    p.add_argument("--alpha-grid", type=float_list, default=ALPHA_GRID,
                   help="alpha candidates for tuning")
    p.add_argument("--constraints", type=Path, default=None,
                   help="file of constraints on the impulse response x")
    _solver_args(p)

    p = sub.add_parser("montecarlo", formatter_class=fmt_cls,
                       help="Monte Carlo comparison of SS+l2 and SS+PLQ estimators")
    p.add_argument("--config", type=Path, default=None, help="key=value file of option defaults")
    p.add_argument("--output-dir", type=Path, default=Path("."),
                   help="directory for runs.csv and summary.json")
    p.add_argument("--runs", type=int, default=30, help="number of Monte Carlo runs")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--n", type=int, default=100, help="impulse-response length")
    p.add_argument("--delay", type=int, default=1, help="input delay in samples")
    p.add_argument("--pairs", type=int, default=400, help="input/output pairs per run")
    p.add_argument("--estimators", type=name_list, default=bench.ESTIMATORS,
                   help="comma-separated subset of " + ",".join(bench.ESTIMATORS))
    _loss_args(p, "l1")
    p.add_argument("--alpha-grid", type=float_list, default=ALPHA_GRID,
                   help="alpha candidates for tuning")
    p.add_argument("--gamma-points", type=int, default=20, help="gamma grid size for cv")
    p.add_argument("--gamma-span", type=float, default=100.0,
                   help="gamma grid covers [g/span, g*span] around the ml value g")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--timing", action="store_true", default=False,
                   help="record wall_ms in runs.csv (makes it non-reproducible)")
    _solver_args(p)

    p = sub.add_parser("penalty-eval", formatter_class=fmt_cls,
                       help="print y,rho(y) for a scalar penalty")
    p.add_argument("--config", type=Path, default=None, help="key=value file of option defaults")
    p.add_argument("--penalty", choices=PENALTY_NAMES, default="huber", help="penalty name")
    p.add_argument("--param", type=key_value, action="append", default=[], metavar="K=V",
                   help="penalty parameter; repeatable")
    p.add_argument("--grid", type=value_grid, default="-5:5:101",
                   help="values as lo:hi:num or a comma-separated list")
    return parser


# -- config files ---------------------------------------------------------------------


def read_config(path: Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}")
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{num}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _convert(action: argparse.Action, key: str, value: str):
    try:
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(action, argparse._AppendAction):
            return [action.type(v.strip()) for v in value.split(",") if v.strip()]
        v = action.type(value) if action.type else value
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise CliError(f"config key {key!r}: {exc}")
    if action.choices is not None and v not in action.choices:
        raise CliError(f"config key {key!r}: {v!r} not in {sorted(action.choices)}")
    return v


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    values = {}
    for key, value in read_config(args.config).items():
        if key not in actions:
            raise CliError(f"unknown config key {key!r}")
        values[key] = _convert(actions[key], key, value)
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


# -- identify -------------------------------------------------------------------------


def read_io_csv(path: Path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"u", "y"} <= {f.strip() for f in reader.fieldnames}:
                raise CliError(f"{path}: header must contain columns u and y")
            rows = [{k.strip(): v for k, v in row.items()} for row in reader]
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}")
    try:
        u = np.array([float(r["u"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
    except (TypeError, ValueError):
        raise CliError(f"{path}: non-numeric or missing value in u/y columns")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
        raise CliError(f"{path}: non-finite value in u/y columns")
    return u, y


def read_constraints(path: Path, n: int):
    """Constraints on ``x`` as ``(A, a)`` with ``A^T x <= a``.

    Lines are ``x>=c``, ``x<=c`` (applied to every coefficient) or
    ``a_1 ... a_n ; bound`` for one general row.
    """
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read constraints {path}: {exc.strerror}")
    cols, rhs = [], []
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].replace(" ", "")
        if not line:
            continue
        try:
            if line.startswith("x>="):
                cols.append(-np.eye(n))
                rhs.append(np.full(n, -float(line[3:])))
            elif line.startswith("x<="):
                cols.append(np.eye(n))
                rhs.append(np.full(n, float(line[3:])))
            else:
                coef, sep, bound = raw.split("#", 1)[0].partition(";")
                a = np.array(float_list(coef))
                if not sep or a.size != n:
                    raise ValueError
                cols.append(a[:, None])
                rhs.append(np.array([float(bound)]))
        except (ValueError, argparse.ArgumentTypeError):
            raise CliError(f"{path}:{num}: expected x>=c, x<=c or {n} coefficients ; bound")
    if not cols:
        raise CliError(f"{path}: no constraints found")
    return np.hstack(cols), np.concatenate(rhs)


def _params(pairs) -> dict:
    return dict(pairs or [])


def _solver_opts(args) -> SolverOptions:
    return SolverOptions(tol=args.tol, max_iter=args.max_iter, sigma=args.sigma, tau=args.tau,
                         verbose=args.verbose)


def identify(args) -> dict:
    if args.input is None:
        raise CliError("--input is required")
    u, y = read_io_csv(args.input)
    data = build_regressor(u, y, args.n, args.delay)
    constraints = None if args.constraints is None else read_constraints(args.constraints, args.n)
    loss_params, reg_params = _params(args.loss_param), _params(args.reg_param)
    opts = _solver_opts(args)
    gamma, alpha = args.gamma, args.alpha
    if gamma == "auto":
        gamma = "ml" if args.loss == "l2" else "cv"
    if alpha == "auto":
        alpha = "cv" if gamma == "cv" else "ml"
    if isinstance(alpha, float) and not alpha < 1:
        raise CliError("--alpha must lie in (0, 1)")
    alpha_grid = (alpha,) if isinstance(alpha, float) else tuple(args.alpha_grid)

    lam = None
    gamma_ml = gamma == "ml"
    if gamma == "ml" or alpha == "ml":
        lam, alpha_ml = fit_hyperparameters_ml(data, alpha_grid)
        if alpha == "ml":
            alpha, alpha_grid = alpha_ml, (alpha_ml,)
        if gamma == "ml":
            gamma = data.sigma2_hat / lam

    closed = (gamma_ml and isinstance(alpha, float) and args.loss == "l2" and args.reg == "l2"
              and constraints is None)
    if closed:
        est = estimate_ss_l2(data, lam, alpha)
        est.objective = marginal_likelihood_objective(lam, alpha, data)
        summary = {"method": "ss_l2_ml", "iterations": 0, "status": "closed-form",
                   "kkt_residual_inf": 0.0}
    elif gamma == "cv" or alpha == "cv":
        grid = [gamma] if isinstance(gamma, float) else None
        if grid is None:
            lam_cv, _ = fit_hyperparameters_ml(data, args.alpha_grid)
            grid = gamma_grid_around(data.sigma2_hat / lam_cv)
        cv = cv_tune_plq(None, None, args.n, args.delay, alpha_grid, grid, loss=args.loss,
                         loss_params=loss_params, reg=args.reg, reg_params=reg_params,
                         constraints=constraints, opts=opts, data=data)
        est = cv.estimate
        summary = {"method": est.method, "iterations": est.iterations, "status": "converged",
                   "cv_score": cv.score}
    else:
        est, rep = fit_ss_plq(data, alpha, gamma, args.loss, loss_params, args.reg, reg_params,
                              constraints, opts)
        if not rep.converged:
            raise CliError(f"solver stopped without converging: {rep.status.value} "
                           f"({rep.message or 'residual ' + fmt(rep.kkt_residual_inf)})",
                           EXIT_SOLVER)
        summary = {"method": "ss_plq", "iterations": rep.iterations,
                   "status": rep.status.value, "kkt_residual_inf": rep.kkt_residual_inf}
    summary.update(alpha=est.alpha, gamma=est.gamma, sigma2=data.sigma2_hat,
                   objective=est.objective, loss=args.loss, regularizer=args.reg)
    if lam is not None:
        summary["lambda"] = lam
    summary["gamma_or_lambda"] = lam if closed else est.gamma

    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "estimate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "coefficient"))
        for i, v in enumerate(est.x_hat, 1):
            w.writerow((i, fmt(v)))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- montecarlo -----------------------------------------------------------------------


def montecarlo(args) -> dict:
    if args.runs < 1:
        raise CliError("--runs must be at least 1")
    if args.workers < 1:
        raise CliError("--workers must be at least 1")
    unknown = set(args.estimators) - set(bench.ESTIMATORS)
    if unknown or not args.estimators:
        raise CliError(f"unknown estimators {sorted(unknown)}; choose from {bench.ESTIMATORS}")
    config = bench.MonteCarloConfig(
        n=args.n, delay=args.delay, n_pairs=args.pairs, estimators=tuple(args.estimators),
        loss=args.loss, loss_params=tuple(sorted(_params(args.loss_param).items())),
        alpha_grid=tuple(args.alpha_grid), gamma_points=args.gamma_points,
        gamma_span=args.gamma_span, solver=_solver_opts(args))

    def progress(run):
        if args.verbose:
            fits = ", ".join(f"{k}={v:.2f}" for k, v in run.fits().items())
            print(f"run {run.run}: {fits}", file=sys.stderr)

    table = bench.run_monte_carlo(args.runs, args.seed, config, args.workers, progress)
    summary = bench.summarize(table)
    summary["seed"] = args.seed
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(bench.runs_csv(table, timing=args.timing))
    (out / "summary.json").write_text(bench.summary_json(summary, config))
    return summary


# -- penalty-eval ---------------------------------------------------------------------


def penalty_eval(args, stream=None) -> None:
    stream = stream or sys.stdout
    p = make_penalty(args.penalty, 1, **_params(args.param))
    grid = np.asarray(args.grid, dtype=float)
    if grid.size == 0:
        raise CliError("empty value grid")
    stream.write("y,rho\n")
    for v in grid:
        stream.write(f"{fmt(v)},{fmt(evaluate(p, [v]))}\n")


# -- main -----------------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        try:
            args = parse_args(argv)
        except SystemExit as exc:
            # argparse exits on usage errors (2) and after --help (0)
            return exc.code if isinstance(exc.code, int) else EXIT_INPUT
        if args.command == "identify":
            identify(args)
        elif args.command == "montecarlo":
            montecarlo(args)
        else:
            penalty_eval(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, RankDeficiencyError, UnboundedPenaltyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FactorizationError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, DimensionError, InvalidParameterError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
