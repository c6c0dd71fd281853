"""Command-line front end.

Subcommands
-----------
validate   check a model file
exact      exact P(T = n) table, optionally cross-checked against the oracles
gamma      rate function at given directions (or an interior simplex grid)
rhostar    minimising direction, optionally against the left Perron vector
converge   (1/|n|) log P(T = n_N) and two-point slopes along a ray
simulate   Monte Carlo progeny, plain or exponentially tilted
graphdemo  inhomogeneous random graph components vs the branching prediction

Exit codes: 0 success, 1 usage or unreadable input, 2 validation failure,
3 numeric abort (underflow guard, solver divergence).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import sys
import time
from fractions import Fraction
from importlib import metadata

import numpy as np

from . import exact, graph, rate, simulate
from .errors import ModelError, NumericAbort, PreconditionError
from .model import OffspringModel, classify, load_model, mean_matrix, perron_root, ray, validate

EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - running from a checkout
        return "0+unknown"


def _manifest(args, started: float) -> dict:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in {"func", "command", "model", "spec", "out", "report"}}
    return {
        "command": args.command,
        "model_file": getattr(args, "model", None) or getattr(args, "spec", None),
        "parameters": params,
        "seed": getattr(args, "seed", None),
        "tool_version": _version(),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }


def _manifest_lines(manifest: dict) -> list[str]:
    return ["manifest " + json.dumps(manifest, sort_keys=True, default=_json_default)]


@contextlib.contextmanager
def _open_out(path, default):
    if path is None or path == "-":
        yield default
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _emit_json(obj, path, default) -> None:
    with _open_out(path, default) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def parse_vector(text: str) -> np.ndarray:
    """Comma-separated numbers; fractions such as ``2/3`` are accepted."""
    try:
        return np.array([float(Fraction(v.strip())) for v in text.split(",")])
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad vector {text!r}: {exc}") from exc


def _load_valid(path) -> OffspringModel:
    model = load_model(path)
    bad = [v for v in validate(model) if v.severity == "error"]
    if bad:
        raise ModelError("invalid model: " + "; ".join(map(str, bad)))
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args, started) -> int:
    model = load_model(args.model)
    violations = validate(model)
    ok = not any(v.severity == "error" for v in violations)
    report = {
        "valid": ok,
        "types": model.m,
        "violations": [{"field": v.field, "rule": v.rule, "severity": v.severity} for v in violations],
    }
    if ok:
        A = mean_matrix(model)
        report.update(mean_matrix=A.tolist(), perron_root=perron_root(A), regime=classify(model))
    report["manifest"] = _manifest(args, started)
    _emit_json(report, args.out, sys.stdout)
    return 0 if ok else EXIT_INVALID


def cmd_exact(args, started) -> int:
    model = _load_valid(args.model)
    table = exact.solve_progeny(model, args.nmax)
    which = ("recursion", "lagrange", "arborescent") if args.oracle == "all" else (
        () if args.oracle == "none" else (args.oracle,)
    )
    oracle_model = model
    dropped = 0.0
    if "recursion" in which and not model.is_table:
        oracle_model, dropped = model.to_tables()
    report = {
        "total_mass": table.total_mass(),
        "oracles": exact.oracle_differences(oracle_model, args.nmax, which) if which else {},
    }
    if dropped:
        report["truncated_mass"] = dropped
    if which:
        report["max_oracle_diff"] = max((v["max_rel_diff"] for v in report["oracles"].values()), default=0.0)
    manifest = _manifest(args, started)
    with _open_out(args.out, sys.stdout) as fh:
        table.write_csv(fh, _manifest_lines(manifest))
    report["manifest"] = manifest
    _emit_json(report, args.report, sys.stderr)
    return 0


def _rate_rows(model, rhos):
    for rho in rhos:
        res = rate.gamma(model, rho)
        yield [*(repr(float(r)) for r in rho), repr(res.gamma), *(repr(float(v)) for v in res.lambda_star),
               repr(res.grad_residual), res.iterations]


def cmd_gamma(args, started) -> int:
    model = _load_valid(args.model)
    rhos = [args.rho] if args.rho is not None else rate.simplex_grid(model.m, args.grid)
    rows = list(_rate_rows(model, rhos))
    m = model.m
    with _open_out(args.out, sys.stdout) as fh:
        for line in _manifest_lines(_manifest(args, started)):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"rho_{j + 1}" for j in range(m)] + ["gamma"] + [f"lambda_{j + 1}" for j in range(m)]
                   + ["grad_residual", "iterations"])
        w.writerows(rows)
    return 0


def cmd_rhostar(args, started) -> int:
    model = _load_valid(args.model)
    result = rate.rho_star(model)
    report = result.to_dict()
    if args.check_eigenvector:
        report["eigenvector_check"] = rate.principal_eigenvector_check(model).to_dict()
    report["manifest"] = _manifest(args, started)
    _emit_json(report, args.out, sys.stdout)
    return 0


def converge_rows(model: OffspringModel, rho, nmax: int):
    """Rows ``(N, n_N, (1/N) log P, -Gamma, slope, gap)`` along ``ray(rho, .)``.

    ``slope`` is the difference quotient between ``n_{N//2}`` and ``n_N``.
    """
    neg_gamma = -rate.gamma(model, rho).gamma
    table = exact.solve_progeny(model, nmax)
    logp = {}
    rows = []
    for N in range(1, nmax + 1):
        n = ray(rho, N)
        p = table.prob(n)
        logp[N] = math.log(p) if p > 0 else -math.inf
        h = N // 2
        slope = gap = math.nan
        if h >= 1 and math.isfinite(logp[N]) and math.isfinite(logp[h]):
            slope = (logp[N] - logp[h]) / (N - h)
            gap = abs(slope - neg_gamma)
        rows.append((N, tuple(int(v) for v in n), logp[N] / N, neg_gamma, slope, gap))
    return rows


def cmd_converge(args, started) -> int:
    model = _load_valid(args.model)
    rows = converge_rows(model, args.rho, args.nmax)
    m = model.m
    with _open_out(args.out, sys.stdout) as fh:
        for line in _manifest_lines(_manifest(args, started)):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size"] + [f"n_{j + 1}" for j in range(m)] + ["log_p_per_size", "neg_gamma", "slope", "gap"])
        for N, n, lp, ng, slope, gap in rows:
            w.writerow([N, *n, repr(lp), repr(ng), repr(slope), repr(gap)])
    last = rows[-1]
    _emit_json({"size": last[0], "slope": last[4], "neg_gamma": last[3], "gap": last[5]}, args.report, sys.stderr)
    return 0


def cmd_simulate(args, started) -> int:
    model = _load_valid(args.model)
    lam = None
    tilt_info = None
    if args.tilt == "auto":
        rs = rate.rho_star(model)
        lam = rate.gamma(model, rs.rho).lambda_star
        tilt_info = {"rho_star": rs.rho.tolist(), "lambda": lam.tolist()}
    elif args.tilt is not None:
        lam = parse_vector(args.tilt)
        tilt_info = {"lambda": lam.tolist()}
    cfg = simulate.SimConfig(args.samples, cap=args.cap, seed=args.seed, tilt_lambda=None if lam is None else tuple(lam),
                             workers=args.workers)
    batch = simulate.sample(model, cfg)
    sizes = range(1, min(args.cap, args.summary_max) + 1)
    summary = simulate.summarize(batch, sizes).to_dict()
    if tilt_info:
        summary["tilt"] = tilt_info
    manifest = _manifest(args, started)
    with _open_out(args.out, sys.stdout) as fh:
        batch.write_csv(fh, {"manifest": manifest})
    summary["manifest"] = manifest
    _emit_json(summary, args.report, sys.stderr)
    return 0


def cmd_graphdemo(args, started) -> int:
    spec = graph.load_spec(args.spec)
    sample = graph.sample_components(spec, args.seed)
    model = graph.local_limit_model(spec)
    table = exact.solve_progeny(model, args.smax)
    pmf = table.size_pmf()
    freq = sample.vertex_size_fractions(args.smax)
    sizes = []
    for s in range(1, args.smax + 1):
        sigma = graph.size_sigma(pmf[s], s, spec.n)
        sizes.append({"size": s, "empirical": freq[s], "predicted": pmf[s], "sigma": sigma,
                      "z": (freq[s] - pmf[s]) / sigma if sigma > 0 else None})
    summary = {"components": int(sample.counts.shape[0]), "largest": sample.largest,
               "supercritical": sample.supercritical, "size_frequencies": sizes}
    if not sample.supercritical:
        rs = rate.rho_star(model).rho
        mean, count = sample.mean_composition(args.min_size)
        summary["composition"] = {"min_size": args.min_size, "components": count,
                                  "mean": None if count == 0 else mean.tolist(), "rho_star": rs.tolist(),
                                  "l1_distance": None if count == 0 else float(np.abs(mean - rs).sum())}
    manifest = _manifest(args, started)
    with _open_out(args.out, sys.stdout) as fh:
        sample.write_csv(fh, _manifest_lines(manifest))
    summary["manifest"] = manifest
    _emit_json(summary, args.report, sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="progeny", description="Total progeny of multi-type branching processes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, target="model"):
        p = sub.add_parser(name, help=help_text)
        p.add_argument(target, help="JSON file")
        p.add_argument("--out", help="output file (default: stdout)")
        p.set_defaults(func=func)
        return p

    add("validate", cmd_validate, "check a model file")

    p = add("exact", cmd_exact, "exact progeny table as CSV")
    p.add_argument("--nmax", type=int, required=True)
    p.add_argument("--oracle", choices=["none", "recursion", "lagrange", "arborescent", "all"], default="none")
    p.add_argument("--report", help="oracle report JSON (default: stderr)")

    p = add("gamma", cmd_gamma, "rate function as CSV")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--rho", type=parse_vector)
    g.add_argument("--grid", type=int, help="interior grid with spacing 1/k")

    p = add("rhostar", cmd_rhostar, "minimising direction as JSON")
    p.add_argument("--check-eigenvector", action="store_true")

    p = add("converge", cmd_converge, "decay along a ray as CSV")
    p.add_argument("--rho", type=parse_vector, required=True)
    p.add_argument("--nmax", type=int, required=True)
    p.add_argument("--report", help="final-slope JSON (default: stderr)")

    p = add("simulate", cmd_simulate, "Monte Carlo records as CSV")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tilt", help="'auto' or a comma-separated lambda vector")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--summary-max", type=int, default=60, help="largest size in the estimator summary")
    p.add_argument("--report", help="estimator summary JSON (default: stderr)")

    p = add("graphdemo", cmd_graphdemo, "random graph components as CSV", target="spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-size", type=int, default=20)
    p.add_argument("--smax", type=int, default=6)
    p.add_argument("--report", help="comparison summary JSON (default: stderr)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        return args.func(args, started)
    except (json.JSONDecodeError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"progeny: error: cannot read input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, PreconditionError) as exc:
        print(f"progeny: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericAbort, OverflowError) as exc:
        print(f"progeny: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
