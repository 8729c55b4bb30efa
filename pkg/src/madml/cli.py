"""Command-line entry point: ``madml fit | cate | simulate``.

Exit codes: 0 success, 1 computation failure, 2 usage or configuration
error, 3 data validation error.  Failures print a one-line JSON object on
stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, effective_config, from_dict, load_config
from .dataset import csv_columns, load_csv, normalize_unit_interval, trim_quantiles
from .estimator import fit_cate, fit_counterfactual
from .exceptions import ConfigError, MadmlError
from .simulation import default_estimators, run_monte_carlo


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _knots(text):
    parts = [p for p in text.split(",") if p.strip()]
    try:
        if len(parts) == 1:
            return int(parts[0])
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--knots takes a count or a comma-separated list of breakpoints, got {text!r}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--seed", type=_seed, help="master random seed")
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                        help="worker count; affects run time only")
    common.add_argument("--knots", type=_knots,
                        help="number of breakpoints (including the two boundaries) or explicit breakpoints")
    common.add_argument("--degree", type=int, help="B-spline degree")
    common.add_argument("--eta", type=float, help="one minus the confidence level")
    common.add_argument("--grid", type=_positive_int, help="number of evaluation grid points")
    common.add_argument("--boot", type=_positive_int, help="bootstrap replications (penalty and bands)")
    common.add_argument("--c0", type=float, help="penalty multiplier c0 (> 1)")
    common.add_argument("--penalty-method", choices=("bootstrap", "cv_only"))

    parser = _Parser(prog="madml", description="Doubly robust series estimation with model-assisted nuisances.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", parents=[common], help="conditional counterfactual mean E[Y(1)|X]")
    p_fit.add_argument("--data", help="input CSV")

    p_cate = sub.add_parser("cate", parents=[common], help="conditional average treatment effect")
    p_cate.add_argument("--data", help="input CSV")
    p_cate.add_argument("--single-arm", action="store_true", help="fit the treated arm only (same output as fit)")

    p_sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo comparison against the benchmark")
    p_sim.add_argument("--dgp", type=str.upper, choices=("S1", "S2", "S3"))
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--dz", type=int)
    p_sim.add_argument("--reps", type=int)
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line overrides into the configuration and re-validate."""
    raw = effective_config(cfg)
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "data", None):
        raw["data"]["path"] = args.data
    if args.knots is not None:
        if isinstance(args.knots, int):
            raw["basis"]["n_knots"] = args.knots
            raw["basis"]["knots"] = None
        else:
            raw["basis"]["knots"] = args.knots
    if args.degree is not None:
        raw["basis"]["degree"] = args.degree
    if args.eta is not None:
        raw["inference"]["eta"] = args.eta
    if args.grid is not None:
        raw["inference"]["grid_size"] = args.grid
        raw["inference"]["grid"] = None
    if args.boot is not None:
        raw["inference"]["n_boot"] = args.boot
        raw["penalty"]["n_boot"] = args.boot
    if args.c0 is not None:
        raw["penalty"]["c0"] = args.c0
    if args.penalty_method is not None:
        raw["penalty"]["method"] = args.penalty_method
    if getattr(args, "single_arm", False):
        raw["single_arm"] = True
    sim = raw["simulation"]
    for flag, key in (("dgp", "dgp"), ("n", "n"), ("dz", "d_z"), ("reps", "reps")):
        v = getattr(args, flag, None)
        if v is not None:
            sim[key] = v
    return from_dict(raw)


def _load_dataset(cfg: RunConfig):
    path = cfg.data.path
    if not path:
        raise ConfigError("no input data: pass --data or set data.path in the config")
    if not Path(path).is_file():
        raise ConfigError(f"data file not found: {path}")
    schema = cfg.schema(csv_columns(path, cfg.data.delimiter))
    ds = load_csv(path, schema, cfg.data.delimiter)
    pre = cfg.preprocess_config()
    n_in = ds.n
    ds, removed = trim_quantiles(ds, pre)
    if pre.normalize:
        ds = normalize_unit_interval(ds)
    return ds, {"rows_read": n_in, "rows_trimmed": removed, "rows_used": ds.n}


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _summary_line(fit):
    diag = fit.diagnostics
    parts = [f"mode={fit.mode}", f"n={fit.n}", f"k={fit.k}", f"c*={fit.uniform_crit:.4f}"]
    for arm in ("treated", "control"):
        if arm in diag:
            d = diag[arm]
            lam_g = ",".join(f"{p['lam_gamma']:.4g}" for p in d["penalties"])
            lam_a = ",".join(f"{p['lam_alpha']:.4g}" for p in d["penalties"])
            parts.append(f"{arm}: lam_gamma=[{lam_g}] lam_alpha=[{lam_a}] "
                         f"propensity_clips={sum(d['propensity_clips'])} outcome_clips={sum(d['outcome_clips'])}")
    return "\n".join(parts)


def cmd_fit(cfg: RunConfig, args, single_arm=True) -> int:
    ds, rows = _load_dataset(cfg)
    ecfg = cfg.estimator_config()
    if single_arm:
        fit = fit_counterfactual(ds, ecfg, seed=cfg.seed, arm="treated", threads=args.threads)
        stem = "fit"
    else:
        fit = fit_cate(ds, ecfg, seed=cfg.seed, threads=args.threads)
        stem = "cate"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit.to_json(out / f"{stem}.json", {"config": effective_config(cfg), "data": rows})
    fit.to_csv(out / f"{stem}_grid.csv")
    print(_summary_line(fit))
    print(f"wrote {out / f'{stem}.json'} and {out / f'{stem}_grid.csv'}")
    return 0


def cmd_cate(cfg: RunConfig, args) -> int:
    return cmd_fit(cfg, args, single_arm=cfg.single_arm)


def cmd_simulate(cfg: RunConfig, args) -> int:
    if cfg.simulation.reps < 2:
        raise ConfigError("--reps must be at least 2")
    dgp = cfg.dgp_config()
    base = cfg.estimator_config()
    report = run_monte_carlo(dgp, default_estimators(base), reps=cfg.simulation.reps, seed=cfg.seed,
                             grid=None if base.grid is None else base.grid, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "simulation.csv")
    report.to_json(out / "simulation.json", {"config": effective_config(cfg)})
    for r in report.rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"wrote {out / 'simulation.csv'} and {out / 'simulation.json'}")
    return 0


COMMANDS = {"fit": cmd_fit, "cate": cmd_cate, "simulate": cmd_simulate}


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(ConfigError(str(exc)), 2)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args)
        if args.command == "fit":
            cfg = replace(cfg, single_arm=True)
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, args)
    except MadmlError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
