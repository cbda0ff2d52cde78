"""Command-line front end: Monte Carlo tables and fits on user files."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Sequence

import numpy as np

from .causal import external_score_spec, fit_iptw, stacked_spec, _check_propensity
from .core import load_dataset, load_summary, parse_schema
from .exceptions import ElfusionError, InputError, NumericalError
from .glm import fit_logistic, full_design, logistic_score_spec, reduced_design
from .integrator import bootstrap_draws, fit_integrated, integration_weights, stage
from .parallel import default_threads
from .simulation import CAUSAL_ESTIMATORS, GLM_ESTIMATORS, BASELINE, ScenarioConfig, format_table, run_monte_carlo

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default; usage problems map to 1 here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _list_of(conv):
    def parse(text: str):
        try:
            vals = [conv(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None
        if not vals:
            raise argparse.ArgumentTypeError("empty list")
        return vals
    return parse


def _add_simulate(sub, name: str, kind: str):
    names = GLM_ESTIMATORS if kind == "glm" else CAUSAL_ESTIMATORS
    p = sub.add_parser(name, help=f"Monte Carlo study for the {kind} scenario",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--n1", type=_list_of(int), default="600", help="internal sample size(s), comma separated")
    p.add_argument("--ratio", type=_list_of(float), default="5", help="external/internal size ratio(s)")
    p.add_argument("--reps", type=_positive_int, default=1000, help="replicates per grid point")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", default=None, help="CSV output path (stdout if omitted)")
    p.add_argument("--estimators", type=_list_of(str), default=f"{BASELINE[kind]},{names[1]}",
                   help=f"comma list from {','.join(names)}")
    p.add_argument("--threads", type=_positive_int, default=default_threads(), help="worker processes")
    p.add_argument("--no-timing", action="store_true", default=False, help="omit the runtime column")
    p.set_defaults(func=_cmd_simulate, kind=kind)


def _add_fit_common(p, need_exposure: bool):
    p.add_argument("--data", required=True, help="internal CSV file")
    p.add_argument("--summary", required=True, action="append", help="external summary JSON (repeatable)")
    example = "y:y,a:a,x1:x,z:z" if need_exposure else "y:y,x1:x,x2:x,x3:x,z:z"
    p.add_argument("--schema", required=True, help=f"column roles, e.g. {example}")
    p.add_argument("--out", default=None, help="JSON output path (stdout if omitted)")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--threads", type=_positive_int, default=default_threads(), help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elfusion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="debug logging")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    _add_simulate(sub, "simulate-glm", "glm")
    _add_simulate(sub, "simulate-causal", "causal")
    for name, kind in (("fit-glm", "glm"), ("fit-causal", "causal")):
        p = sub.add_parser(name, help=f"integrated {kind} fit on user data",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        _add_fit_common(p, kind == "causal")
        p.add_argument("--bootstrap", type=int, default=0, metavar="B",
                       help="bootstrap replicates for the covariance (0 disables, else >= 100)")
        p.set_defaults(func=_cmd_fit, kind=kind)
    p = sub.add_parser("weights", help="EL weights only",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_fit_common(p, False)
    p.add_argument("--model", choices=("glm", "causal"), default="glm", help="which external model the summaries describe")
    p.set_defaults(func=_cmd_weights, kind=None)
    return parser


def _emit(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _cmd_simulate(args) -> int:
    tables = []
    header = True
    chunks = []
    for n1 in args.n1:
        for ratio in args.ratio:
            cfg = ScenarioConfig(args.kind, n1, ratio, args.reps, args.seed, tuple(args.estimators))
            log.info("running %s", cfg.label)
            t = run_monte_carlo(cfg, threads=args.threads)
            tables.append(t)
            chunks.append(t.to_csv(header=header, timing=not args.no_timing))
            header = False
    _emit("".join(chunks), args.out)
    if args.out is not None:
        sys.stdout.write(format_table(tables))
    return EXIT_OK


def _specs(kind: str, data):
    if kind == "glm":
        psi = logistic_score_spec(reduced_design, 1 + data.p_x, name="reduced score")
        g = logistic_score_spec(full_design, 1 + data.p_x + data.p_z, name="full score")
        return psi, g
    return external_score_spec(data), stacked_spec(data)


def _load(args, kind):
    schema = parse_schema(args.schema)
    data = load_dataset(args.data, schema)
    if kind == "causal" and data.a is None:
        raise InputError("fit-causal needs an exposure column (role 'a') in --schema")
    summaries = [load_summary(s) for s in args.summary]
    return data, summaries


def _weights_summary(p) -> dict:
    return {"min": float(p.min()), "max": float(p.max()), "ess": float(1.0 / np.sum(p**2))}


def _cmd_fit(args) -> int:
    t0 = time.perf_counter()
    data, summaries = _load(args, args.kind)
    psi, g = _specs(args.kind, data)
    with stage("initial_fit"):
        if args.kind == "glm":
            init = fit_logistic(full_design(data), data.y).beta
        else:
            base = fit_iptw(data)
            init = np.concatenate([base.beta_msm, base.gamma])
    fit = fit_integrated(data, summaries, psi, g, init)
    if args.kind == "causal":
        _check_propensity(data, fit.beta[2:])
    out = {
        "beta": fit.beta.tolist(),
        "theta_meta": fit.theta_meta.theta_meta.tolist(),
        "rho": fit.weights.rho.tolist(),
        "weights_summary": _weights_summary(fit.weights.p),
        "diagnostics": {
            "n": data.n,
            "sources": len(summaries),
            "solver_iterations": fit.iterations,
            "residual_norm": fit.residual_norm,
            "el_iterations": fit.weights.iterations,
            "el_grad_norm": fit.weights.grad_norm,
            "theta_internal": fit.theta_internal.tolist(),
        },
    }
    if args.kind == "causal":
        out["diagnostics"]["log_odds_ratio"] = float(fit.beta[1])
    timing = dict(fit.timing)
    if args.bootstrap:
        tb = time.perf_counter()
        draws, fails = bootstrap_draws(data, summaries, psi, g, fit.beta, args.bootstrap, args.seed, args.threads)
        out["cov"] = np.atleast_2d(np.cov(draws, rowvar=False)).tolist()
        out["diagnostics"]["bootstrap_replicates"] = args.bootstrap
        out["diagnostics"]["bootstrap_failures"] = fails
        timing["bootstrap"] = time.perf_counter() - tb
    timing["wall"] = time.perf_counter() - t0
    out["timing"] = timing
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


def _cmd_weights(args) -> int:
    data, summaries = _load(args, args.model)
    psi, _ = _specs(args.model, data)
    iw = integration_weights(data, summaries, psi)
    out = {
        "theta_meta": iw.theta_meta.theta_meta.tolist(),
        "rho": iw.weights.rho.tolist(),
        "weights_summary": _weights_summary(iw.weights.p),
        "weights": iw.weights.p.tolist(),
        "diagnostics": {"n": data.n, "sources": len(summaries), "el_iterations": iw.weights.iterations,
                        "el_grad_norm": iw.weights.grad_norm},
        "timing": iw.timing,
    }
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        stage = exc.stage or "unknown"
        print(f"numerical failure in stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ElfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
