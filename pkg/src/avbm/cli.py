"""Command-line entry point: ``avbm <command> [--config cfg.json] [overrides]``.

Exit status: 0 on success, 2 on validation errors, 3 on numeric failures.
Data goes to the output file (or stdout); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import bounds, lambda_mix
from .bounds import ConvergenceError, ValidationError
from .config import COMMANDS, FORMATS, RunConfig, apply_overrides, load_config, parse_config
from .harness import REPORT_SCHEMA_VERSION, run_coverage, run_lln_coverage, run_proof_object_suite, run_tightness_comparison
from .sim import dump_binary, generate, write_csv

log = logging.getLogger("avbm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avbm", description="Time-uniform PAC-Bayes Bernstein bounds for martingale mixtures.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--delta", type=float)
        s.add_argument("--trials", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--horizon", type=int)
        s.add_argument("--out", help="output file (default: stdout)")
        s.add_argument("--format", choices=FORMATS)
        s.add_argument("--workers", type=int, default=None,
                       help="parallel trial workers (default: $AVBM_WORKERS or 1)")
        s.add_argument("--tau0-variant", choices=bounds.TAU0_VARIANTS)
        s.add_argument("-v", "--verbose", action="count", default=None)
        if name == "bound-eval":
            s.add_argument("--kl", type=float, default=0.0)
            s.add_argument("--variance", type=float, help="posterior mean conditional variance <V_t>")
            s.add_argument("--mean", type=float, default=None, help="posterior mean deviation <M_t>")
            s.add_argument("--increment-bound", type=float, default=None)
            s.add_argument("--t", type=int, default=None, help="time index for the fixed-time baseline")
        if name == "simulate":
            s.add_argument("--binary", help="also write an AVBM binary dump here")
    return p


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _emit(text: str, cfg: RunConfig):
    if cfg.output_path:
        Path(cfg.output_path).write_text(text)
        log.info("wrote %s", cfg.output_path)
    else:
        sys.stdout.write(text)


def _envelope(cfg: RunConfig, kind: str, result) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "report": kind, "config": cfg.to_dict(), "result": result}


def cmd_bound_eval(args, cfg: RunConfig):
    if args.variance is None:
        raise ValidationError("--variance is required for bound-eval")
    if args.variance < 0 or args.kl < 0:
        raise ValidationError("--variance and --kl must be nonnegative")
    c = args.increment_bound or (cfg.params.increment_bound if args.config else bounds.E2)
    params = bounds.BoundParams(cfg.params.delta, c, cfg.params.tau0_variant)
    s = params.scale
    v = args.variance * s * s
    kl = args.kl
    explicit = bounds.canonical_explicit_radius(v, params.delta, kl)
    implicit = bounds.canonical_implicit_radius(v, params.delta, kl) if v > 0 else None
    thr = bounds.canonical_tau0_threshold(params.delta, kl, params.tau0_variant)
    out = {
        "delta": params.delta,
        "kl": kl,
        "mean_v": args.variance,
        "increment_bound": c,
        "tau0_variant": params.tau0_variant,
        "tau0_threshold": thr / (s * s) / bounds.BERNSTEIN_SCALE,
        "tau0_reached": bounds.BERNSTEIN_SCALE * v >= thr,
        "lln_radius": bounds.LAMBDA0 * bounds.BERNSTEIN_SCALE * v / s,
        "lil_radius_explicit": None if explicit is None else explicit / s,
        "lil_radius_implicit": None if implicit is None else implicit / s,
    }
    if args.t is not None:
        base = bounds.canonical_seldin_radius(v, args.t, params.delta, kl)
        out["t"] = args.t
        out["seldin_fixed_time_radius"] = None if base is None else base / s
    if args.mean is not None:
        m = args.mean * s
        z = bounds.canonical_zeta(m, bounds.BERNSTEIN_SCALE * v, params.delta, kl)
        out["mean_m"] = args.mean
        out["zeta"] = None if z is None else z / s
        lln_ok = abs(m) <= bounds.LAMBDA0 * bounds.BERNSTEIN_SCALE * v
        lil_ok = implicit is None or abs(m) <= max(implicit, 1.0)
        out["violated"] = bool(out["tau0_reached"] and not (lln_ok and lil_ok))
    if cfg.output_format == "csv":
        return _rows_csv([out])
    return _dump_json(out)


def cmd_simulate(args, cfg: RunConfig):
    if cfg.family is None:
        raise ValidationError("simulate needs experiment.family in --config")
    bundle = generate(cfg.family)
    if args.binary:
        Path(args.binary).write_bytes(dump_binary(bundle))
    if cfg.output_format == "csv":
        buf = io.StringIO()
        write_csv(bundle, buf)
        return buf.getvalue()
    return _dump_json(_envelope(cfg, "paths", {"m": bundle.m.tolist(), "v": bundle.v.tolist()}))


def cmd_coverage(args, cfg: RunConfig, lln: bool):
    spec = cfg.experiment()
    report = (run_lln_coverage if lln else run_coverage)(spec, workers=args.workers)
    log.info("violating trials: %d / %d (Wilson upper %.4g)", report.n_violating_trials,
             report.n_trials, report.wilson_upper_95)
    if report.errors:
        log.error("%d trial(s) failed: %s", len(report.errors), report.errors[0]["error"])
    if cfg.output_format == "csv":
        return _rows_csv(report.histogram_rows()) or "t,first_violations,cumulative\n"
    return _dump_json(_envelope(cfg, "lln-coverage" if lln else "coverage", report.to_dict()))


def cmd_compare(args, cfg: RunConfig):
    spec = cfg.experiment()
    grid = cfg.t_grid or tuple(sorted({max(1, spec.family.horizon // 10**k) for k in range(4)}))
    rows = run_tightness_comparison(spec, grid)
    if cfg.output_format == "csv":
        return _rows_csv(rows)
    return _dump_json(_envelope(cfg, "compare", rows))


def cmd_proof_suite(args, cfg: RunConfig):
    spec = cfg.experiment()
    lambdas = cfg.lambdas or (bounds.LAMBDA0, -bounds.LAMBDA0)
    res = run_proof_object_suite(spec, lambdas, cfg.stop_rule, workers=args.workers)
    if cfg.output_format == "csv":
        return _rows_csv(res["checks"])
    return _dump_json(_envelope(cfg, "proof-suite", res))


def cmd_lambda_check(args, cfg: RunConfig):
    res = lambda_mix.run_lambda_checks(cfg.params, cfg.n_samples, cfg.n_states, cfg.quadrature_points,
                                       cfg.base_seed)
    if cfg.output_format == "csv":
        flat = {k: v for k, v in res.items() if k != "averaging_bound"}
        flat["min_log_margin"] = res["averaging_bound"]["min_log_margin"]
        flat["n_failures"] = len(res["averaging_bound"]["failures"])
        return _rows_csv([flat])
    return _dump_json(_envelope(cfg, "lambda-check", res))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.command) if args.config else parse_config({}, args.command)
    cfg = apply_overrides(cfg, delta=args.delta, trials=args.trials, seed=args.seed, horizon=args.horizon,
                          out=args.out, fmt=args.format, tau0_variant=args.tau0_variant, verbosity=args.verbose)
    logging.basicConfig(level=logging.WARNING - 10 * min(cfg.verbosity, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None and "AVBM_WORKERS" in os.environ:
        args.workers = int(os.environ["AVBM_WORKERS"])
    handlers = {
        "simulate": cmd_simulate,
        "bound-eval": cmd_bound_eval,
        "coverage": lambda a, c: cmd_coverage(a, c, lln=False),
        "lln-coverage": lambda a, c: cmd_coverage(a, c, lln=True),
        "compare": cmd_compare,
        "proof-suite": cmd_proof_suite,
        "lambda-check": cmd_lambda_check,
    }
    _emit(handlers[cfg.command](args, cfg), cfg)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"avbm: error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"avbm: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
