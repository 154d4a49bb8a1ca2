"""Command-line interface: ``peerexposure {run,summarize,trend,simulate,validate}``.

Exit codes: 0 success, 1 input or validation error, 2 numerical failure.
Logs go to stderr; stdout carries only machine-readable summaries.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .market_data import DataError, load_factors, load_ghg, load_returns
from .pipeline import (
    SUMMARY_HEADER,
    TREND_HEADER,
    PipelineError,
    RunConfig,
    SummaryRow,
    _write_csv,
    fit_time_trend,
    read_heterogeneity,
    run_series,
    summary_rows,
    summarize_series,
    trend_rows,
    write_outputs,
)
from .regression import RegressionError
from .synthetic import SimSpec, paper_scale_spec, write_simulation

logger = logging.getLogger("peerexposure")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(kind):
    def parse(text: str):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None

    return parse


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("inputs")
    g.add_argument("--config", default=S, help="JSON file with flat keys mirroring the run settings")
    g.add_argument("--returns", default=S, help="long CSV date,stock_id,ret")
    g.add_argument("--factors", default=S, help="wide CSV date,MKT,SMB,HML,RMW,CMA,MOM,RF")
    g.add_argument("--ghg", default=S, help="CSV firm_id,fiscal_year,(co2e_tonnes,revenue | intensity)")
    g.add_argument("--factor-units", dest="factor_units", choices=("decimal", "percent"), default=S)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("evaluation")
    g.add_argument("--out-dir", dest="out_dir", default=S, help="output directory (default: out)")
    g.add_argument("--start", default=S, help="first evaluation month YYYY-MM (default 2014-01)")
    g.add_argument("--end", default=S, help="last evaluation month YYYY-MM (default: data end minus horizon)")
    g.add_argument("--horizons", type=_csv_list(int), default=S, help="comma list of horizons in months, e.g. 3,6,12")
    g.add_argument("--trend-horizon", dest="trend_horizon", type=int, default=S, help="horizon used for trend.csv")
    g.add_argument("--min-coverage", dest="min_coverage", type=float, default=S, help="minimum share of non-missing returns (0.9)")
    g = p.add_argument_group("peer groups")
    g.add_argument("--lower-q", dest="lower_q", type=float, default=S, help="green quantile (0.25)")
    g.add_argument("--upper-q", dest="upper_q", type=float, default=S, help="brown quantile (0.75)")
    g.add_argument("--ghg-lag-months", dest="ghg_lag_months", type=int, default=S, help="GHG release lag (12)")
    g = p.add_argument_group("screening")
    g.add_argument("--lambda-grid", dest="lambda_grid", type=_csv_list(float), default=S, help="comma list of cutoffs in (0,1)")
    g.add_argument("--bootstrap-reps", dest="bootstrap_reps", type=int, default=S, help="bootstrap resamples (250)")
    g.add_argument("--min-pvalues", dest="min_pvalues", type=int, default=S, help="minimum usable p-values per stock (5)")
    g.add_argument("--significance", type=float, default=S, help="level for the significant-exposure share (0.05)")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--threads", type=int, default=S, help="worker threads, 0 = all cores; output does not depend on it")
    g = p.add_argument_group("HAC")
    g.add_argument("--no-prewhiten", dest="prewhiten", action="store_false", default=S)
    g.add_argument("--fixed-bandwidth", dest="fixed_bandwidth", type=float, default=S, help="fixed QS bandwidth instead of automatic")
    g.add_argument("--no-df-adjust", dest="df_adjust", action="store_false", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peerexposure", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{run,summarize,trend,simulate,validate}")

    p = sub.add_parser("run", help="evaluate the monthly heterogeneity series and write all reports")
    _add_input_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("validate", help="load and check the input files without computing")
    _add_input_flags(p)

    p = sub.add_parser("summarize", help="heterogeneity_summary.csv from an existing heterogeneity.csv")
    p.add_argument("--heterogeneity", required=True)
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = sub.add_parser("trend", help="trend.csv from an existing heterogeneity.csv")
    p.add_argument("--heterogeneity", required=True)
    p.add_argument("--horizon", type=int, default=None, help="horizon to fit (default: shortest present)")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--no-prewhiten", dest="prewhiten", action="store_false", default=True)

    p = sub.add_parser("simulate", help="write synthetic input files and ground_truth.json")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--preset", choices=("small", "paper"), default="small")
    p.add_argument("--n-stocks", dest="n_stocks", type=int, default=None)
    p.add_argument("--months", type=int, default=None)
    p.add_argument("--start", default="2014-01", help="first month of simulated data")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    allowed = set(RunConfig.field_names())
    values: dict = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        path = Path(cfg_path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise DataError(f"{path}: config must be a JSON object")
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise DataError(f"{path}: unknown config keys {unknown}")
        values.update(doc)
        base = path.parent
        for key in ("returns", "factors", "ghg"):
            if isinstance(values.get(key), str) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
    for key, val in vars(args).items():
        if key in allowed:
            values[key] = val
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise DataError(f"invalid configuration: {exc}") from None


def _cmd_run(args) -> int:
    config = resolve_config(args)
    result = run_series(config)
    paths = write_outputs(result, config.out_dir)
    realized = {f"{u}/{h}": sum(e.status == "ok" for e in es) for (u, h), es in result.series.items()}
    print(json.dumps({"outputs": {k: str(v) for k, v in paths.items()}, "realized_cells": realized}, sort_keys=True))
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = resolve_config(args)
    report = {}
    problems = []
    for name, loader in (
        ("returns", lambda p: load_returns(p)),
        ("factors", lambda p: load_factors(p, units=config.factor_units)),
        ("ghg", lambda p: load_ghg(p)),
    ):
        path = getattr(config, name)
        if path is None:
            problems.append(f"{name}: no file given")
            continue
        try:
            obj = loader(path)
        except DataError as exc:
            problems.append(f"{name}: {exc}")
            continue
        if name == "returns":
            report[name] = {"dates": len(obj.calendar), "stocks": len(obj.stocks), "missing_cells": int(obj.missing.sum())}
        elif name == "factors":
            report[name] = {"dates": len(obj.calendar), "factors": list(obj.names)}
        else:
            report[name] = {"records": len(obj), "firms": len(obj.firms)}
    print(json.dumps({"valid": not problems, "inputs": report, "problems": problems}, sort_keys=True))
    for p in problems:
        logger.error(p)
    return EXIT_INPUT if problems else EXIT_OK


def _out_dir(args) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(args.heterogeneity).parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_summarize(args) -> int:
    series = read_heterogeneity(args.heterogeneity)
    rows = []
    for (u, h), entries in series.items():
        for k, name in enumerate(entries[0].factors):
            rows.append(SummaryRow(u, h, name, *summarize_series(entries, k)))
    path = _out_dir(args) / "heterogeneity_summary.csv"
    _write_csv(path, SUMMARY_HEADER, summary_rows(rows))
    sys.stdout.write(path.read_text())
    return EXIT_OK


def _cmd_trend(args) -> int:
    from .regression import HacOptions

    series = read_heterogeneity(args.heterogeneity)
    horizons = sorted({h for _, h in series})
    h = args.horizon if args.horizon is not None else horizons[0]
    if h not in horizons:
        raise DataError(f"horizon {h} not present in {args.heterogeneity}")
    trends = []
    opts = HacOptions(prewhiten=args.prewhiten)
    for (u, hh), entries in series.items():
        if hh != h:
            continue
        for k in range(len(entries[0].factors)):
            trends.append(fit_time_trend(entries, k, opts, u))
    path = _out_dir(args) / "trend.csv"
    _write_csv(path, TREND_HEADER, trend_rows(trends))
    sys.stdout.write(path.read_text())
    return EXIT_OK


def _cmd_simulate(args) -> int:
    if args.preset == "paper":
        spec = paper_scale_spec(seed=args.seed, start_month=args.start)
        if args.months is not None:
            spec = replace(spec, n_months=args.months)
        if args.n_stocks is not None:
            raise UsageError("--n-stocks cannot be combined with --preset paper")
    else:
        spec = SimSpec(
            n_stocks=args.n_stocks or 40,
            n_months=args.months or 12,
            start_month=args.start,
            beta_sd=(0.3, 0.3, 0.3, 0.3, 0.3, 0.3),
            seed=args.seed,
        )
    paths = write_simulation(spec, args.out_dir)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "validate": _cmd_validate,
    "summarize": _cmd_summarize,
    "trend": _cmd_trend,
    "simulate": _cmd_simulate,
}


def _configure_logging(level: int) -> None:
    # bind to the current stderr on every call; basicConfig would keep the first one
    for h in list(logger.handlers):
        if getattr(h, "_peerexposure", False):
            logger.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._peerexposure = True
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    _configure_logging(logging.WARNING - 10 * min(args.verbose, 2))
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (DataError, PipelineError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (RegressionError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
