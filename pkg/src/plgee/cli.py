"""Command-line front end: CSV ingestion, fitting, diagnostics, simulation.

All outputs are JSON with sorted keys and floats printed to 17 significant
digits, so byte-identical reruns are the norm and round-tripping is exact.
Exit codes: 0 success, 1 error, 2 completed-with-warnings (non-convergence
or too many failed replicates).
"""

import argparse
import csv
import json
import sys

import numpy as np

from .diagnostics import (
    condition_trend_report,
    design_diagnostics,
    example1_closed_form,
    trend_flags,
)
from .errors import PlgeeError, SchemaError, ShapeError
from .estimator import (
    METHOD_INDEPENDENCE,
    CorrelationEstimate,
    estimate_correlation,
    gee_independence_fit,
    sandwich_covariance,
    two_step_fit,
    wald_intervals,
)
from .matkernel import SymMatrix
from .model import LINK_KINDS, LinkFamily, LongitudinalDataset
from .simulator import SimConfig, mix_seed, monte_carlo_run, per_replicate_rows

MAX_FAILURE_FRACTION = 0.02


# ---------------------------------------------------------------------------
# stable JSON
# ---------------------------------------------------------------------------

def _format_float(x):
    if x != x:
        return "NaN"
    if x == float("inf"):
        return "Infinity"
    if x == float("-inf"):
        return "-Infinity"
    return format(x, ".17g")


def dumps_stable(obj):
    """JSON text with sorted keys and 17-significant-digit floats."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, float):
        return _format_float(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, np.floating):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps_stable(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps_stable(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(json.dumps(str(k)) + ":" + dumps_stable(v)
                              for k, v in items) + "}"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _write_json(payload, out_path):
    text = dumps_stable(payload) + "\n"
    if out_path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _emit_error(exc):
    kind = getattr(exc, "kind", "error")
    sys.stderr.write(dumps_stable({"error": kind, "detail": str(exc)}) + "\n")


# ---------------------------------------------------------------------------
# CSV dataset interface
# ---------------------------------------------------------------------------

def parse_dataset_csv(path):
    """Long-format CSV `subject,time,y,x1,...,xp` -> LongitudinalDataset.

    Subjects are ordered by first appearance (the filtration order); every
    subject must contribute exactly the same set of time indices 1..m.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["subject", "time", "y"]:
            raise SchemaError(
                f"header must start with subject,time,y got {header[:3]}"
            )
        xcols = header[3:]
        expected = [f"x{k + 1}" for k in range(len(xcols))]
        if not xcols or xcols != expected:
            raise SchemaError(f"covariate columns must be x1..xp, got {xcols}")
        p = len(xcols)

        order = []                 # subjects by first appearance
        rows = {}                  # subject -> {time: (y, x)}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + p:
                raise SchemaError(f"row {lineno} has {len(row)} fields, expected {3 + p}")
            subject = row[0].strip()
            try:
                time = int(row[1])
                y = float(row[2])
                x = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise SchemaError(f"non-numeric cell at row {lineno}: {exc}") from None
            if subject not in rows:
                rows[subject] = {}
                order.append(subject)
            if time in rows[subject]:
                raise SchemaError(f"duplicate (subject,time) = ({subject},{time})")
            rows[subject][time] = (y, x)

    if not order:
        raise SchemaError("CSV contains no data rows")
    m = len(rows[order[0]])
    times = list(range(1, m + 1))
    for subject in order:
        got = rows[subject]
        if len(got) != m:
            raise SchemaError(f"subject {subject} has {len(got)} rows, expected {m}")
        if sorted(got) != times:
            raise SchemaError(
                f"subject {subject} must have time values 1..{m}, got {sorted(got)}"
            )
    X = np.empty((len(order), m, p))
    y = np.empty((len(order), m))
    for i, subject in enumerate(order):
        for j, t in enumerate(times):
            y[i, j], xs = rows[subject][t]
            X[i, j] = xs
    return LongitudinalDataset(X, y)


def write_dataset_csv(data, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "time", "y"] + [f"x{k + 1}" for k in range(data.p)])
        for i in range(data.n):
            for j in range(data.m):
                writer.writerow(
                    [str(i + 1), str(j + 1), _format_float(float(data.y[i, j]))]
                    + [_format_float(float(v)) for v in data.X[i, j]]
                )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_dataset(args):
    data = parse_dataset_csv(args.data)
    if getattr(args, "shuffle_subjects", None) is not None:
        rng = np.random.Generator(np.random.PCG64(mix_seed(args.shuffle_subjects, 0)))
        data = data.permuted(rng.permutation(data.n))
    return data


def cmd_fit(args):
    data = _load_dataset(args)
    family = LinkFamily(args.link)
    if args.method == "two-step":
        fit = two_step_fit(data, family)
        R_tilde = (fit.correlation_used.R_tilde.a.tolist()
                   if fit.correlation_used is not None else None)
    else:
        fit = gee_independence_fit(data, family)
        identity = CorrelationEstimate(R_tilde=SymMatrix(np.eye(data.m)),
                                       computed_at_beta=fit.beta_hat,
                                       n_used=data.n)
        fit.cov_beta = sandwich_covariance(data, family, fit.beta_hat,
                                           identity).cov_beta
        R_tilde = None
    stderr = np.sqrt(np.maximum(np.diag(fit.cov_beta.a), 0.0))
    payload = {
        "beta_hat": fit.beta_hat.tolist(),
        "cov_beta": fit.cov_beta.a.tolist(),
        "stderr": stderr.tolist(),
        "wald_ci": [list(ci) for ci in wald_intervals(fit, level=args.ci_level)],
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "final_gnorm": float(fit.final_gnorm),
        "method": fit.method,
        "R_tilde": R_tilde,
        "fallback_flag": bool(fit.fallback_to_independence),
    }
    _write_json(payload, args.out)
    return 0 if fit.converged else 2


def cmd_diagnose(args):
    data = _load_dataset(args)
    family = LinkFamily(args.link)
    if args.beta is not None:
        beta = np.asarray([float(v) for v in args.beta.split(",")], dtype=float)
        if beta.shape != (data.p,):
            raise SchemaError(f"--beta must have {data.p} comma-separated values")
    else:
        beta = gee_independence_fit(data, family).beta_hat
    corr = estimate_correlation(data, family, beta)
    report = design_diagnostics(data, family, beta, corr.R_tilde)
    payload = {"report": report.to_json(), "beta": beta.tolist()}
    try:
        payload["example1"] = example1_closed_form(data, family, beta)
    except ShapeError:
        payload["example1"] = None
    grid = ([int(v) for v in args.grid.split(",")] if args.grid else [data.n])
    trend = condition_trend_report(data, family, beta, R=None, n_grid=grid)
    payload["trend"] = [r.to_json() for r in trend]
    payload["trend_flags"] = trend_flags(trend, det_floor=args.det_floor)
    _write_json(payload, args.out)
    return 0


def cmd_simulate(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    config = SimConfig.from_json(doc)
    report = monte_carlo_run(config, workers=args.workers)
    _write_json(report.to_json(), args.out)
    if args.replicates_csv:
        rows = per_replicate_rows(config, workers=args.workers)
        with open(args.replicates_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            cols = (["rep", "converged"]
                    + [f"beta{k + 1}" for k in range(config.p)]
                    + [f"z{k + 1}" for k in range(config.p)]
                    + [f"covered{k + 1}" for k in range(config.p)])
            writer.writerow(cols)
            for row in rows:
                if row["converged"]:
                    writer.writerow([row["rep"], 1]
                                    + [_format_float(v) for v in row["beta_hat"]]
                                    + [_format_float(v) for v in row["z"]]
                                    + [int(c) for c in row["covered"]])
                else:
                    writer.writerow([row["rep"], 0] + [""] * (3 * config.p))
    frac_failed = report.n_failures / report.replications
    return 0 if frac_failed <= MAX_FAILURE_FRACTION else 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plgee",
        description="Two-step pseudo-likelihood GEE fitting, diagnostics, "
                    "and Monte Carlo simulation for longitudinal data.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    fit = sub.add_parser("fit", help="fit a marginal model from a long-format CSV")
    fit.add_argument("--data", required=True, help="input CSV path")
    fit.add_argument("--link", required=True, choices=LINK_KINDS)
    fit.add_argument("--method", default="two-step",
                     choices=[METHOD_INDEPENDENCE, "two-step"])
    fit.add_argument("--ci-level", type=float, default=0.95, dest="ci_level")
    fit.add_argument("--out", default="-", help="output JSON path (default stdout)")
    fit.add_argument("--shuffle-subjects", type=int, default=None,
                     dest="shuffle_subjects",
                     help="permute subject order with this seed (sensitivity check)")
    fit.set_defaults(func=cmd_fit)

    diag = sub.add_parser("diagnose", help="regularity diagnostics at a beta")
    diag.add_argument("--data", required=True)
    diag.add_argument("--link", required=True, choices=LINK_KINDS)
    diag.add_argument("--beta", default=None,
                      help="comma-separated beta; omitted -> preliminary "
                           "independence fit")
    diag.add_argument("--grid", default=None,
                      help="comma-separated subject-prefix sizes for the trend table")
    diag.add_argument("--det-floor", type=float, default=1e-6, dest="det_floor")
    diag.add_argument("--out", default="-")
    diag.add_argument("--shuffle-subjects", type=int, default=None,
                      dest="shuffle_subjects")
    diag.set_defaults(func=cmd_diagnose)

    sim = sub.add_parser("simulate", help="seeded Monte Carlo run from a JSON config")
    sim.add_argument("--config", required=True, help="SimConfig JSON path")
    sim.add_argument("--out", default="-")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--replicates-csv", default=None, dest="replicates_csv",
                     help="optional per-replicate CSV dump")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlgeeError as exc:
        _emit_error(exc)
        return 1
    except OSError as exc:
        sys.stderr.write(dumps_stable({"error": "io", "detail": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
