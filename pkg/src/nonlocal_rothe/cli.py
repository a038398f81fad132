"""
Batch experiment driver.

    nonlocal-rothe {solve,ladder,verify,compare,weights,bench} [--config FILE] [--key value ...]

Exit codes: 0 when every check passes, 1 when a diagnostic fails, 2 on an
execution error (bad config, unreadable data, solver failure).
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import DEFAULTS, PARSERS, ExperimentConfig, parse_config
from .core import GridFunction, SolverConfig
from .datafiles import (
    format_float,
    load_trajectory,
    resolve_field,
    resolve_kappa,
    resolve_source,
    write_dict_rows,
    write_rows,
    write_trajectory,
    write_weight_profile,
)
from .diagnostics import (
    DiagnosticEntry,
    DiagnosticsReport,
    comparison_check,
    verify_trajectory,
)
from .errors import ConfigError, NonlocalRotheError
from .kernel import assemble
from .ladder import CAUCHY_SLACK, MONOTONE_TOL, cauchy_gap, ladder_report_rows, monotone_defect, run_ladder
from .operator import NonlocalOperator, apply
from .stepper import apriori_energy_report, solve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIAGNOSTIC_FAIL = 1
EXIT_ERROR = 2

SUBCOMMANDS = ("solve", "ladder", "verify", "compare", "weights", "bench")

LADDER_COLUMNS = ("level", "sup_l1_gap_to_next", "a_nm_to_next", "bound", "monotone_defect")


def configure_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    handler = logging.FileHandler(log_file) if log_file else logging.StreamHandler(sys.stderr)
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[handler],
        force=True,
    )
    logging.getLogger(__name__).debug(f"Logging initialized at {level.upper()}")


def _operator(config: ExperimentConfig, cfg: SolverConfig) -> NonlocalOperator:
    kw = assemble(
        config.grid(),
        cfg,
        kappa=resolve_kappa(config.kappa),
        lam=config.kernel_lambda,
        bandwidth=config.bandwidth,
    )
    return NonlocalOperator.from_config(kw, cfg)


def _problem(config: ExperimentConfig):
    cfg = config.solver_config()
    op = _operator(config, cfg)
    grid, tg = config.grid(), config.time_grid()
    u0 = resolve_field(config.u0, grid, config.nonneg)
    f = resolve_source(config.f, grid, tg, config.nonneg)
    return cfg, op, u0, f


def _finish(report: DiagnosticsReport, path: Path) -> int:
    report.to_csv(path)
    print(report.summary())
    for entry in report.failures():
        logger.warning(f"Check failed: {entry.name} = {entry.value:.6e} > {entry.bound:.3e}")
    return EXIT_OK if report.passed else EXIT_DIAGNOSTIC_FAIL


def _run_solve(config: ExperimentConfig) -> int:
    cfg, op, u0, f = _problem(config)
    traj = solve(u0, f, config.time_grid(), op, cfg)
    write_trajectory(traj, config.output_path("trajectory.csv"))
    report = apriori_energy_report(traj, op)
    write_rows(
        config.output_path("apriori.csv"),
        ["quantity", "value"],
        [
            ["sup_l2_squared", format_float(report.sup_l2)],
            ["time_integrated_energy", format_float(report.time_integrated_energy)],
        ],
    )
    print(f"trajectory written to {config.output_path('trajectory.csv')}")
    return EXIT_OK


def _run_ladder(config: ExperimentConfig) -> int:
    cfg, op, u0, f = _problem(config)
    run = run_ladder(f, u0, config.levels, config.time_grid(), op, cfg)
    write_dict_rows(config.output_path("ladder.csv"), LADDER_COLUMNS, ladder_report_rows(run))
    report = DiagnosticsReport(metadata={"levels": ",".join(f"{n:g}" for n in run.levels)})
    report.add(DiagnosticEntry.make("monotone_defect", monotone_defect(run), MONOTONE_TOL))
    for i in range(len(run.levels)):
        for j in range(i + 1, len(run.levels)):
            gap = cauchy_gap(run, i, j)
            report.add(
                DiagnosticEntry.make(
                    f"cauchy[{run.levels[i]:g},{run.levels[j]:g}]",
                    gap.observed,
                    gap.bound + CAUCHY_SLACK,
                    context=f"a_nm={gap.a_nm:.3e}",
                )
            )
    return _finish(report, config.output_path("ladder_checks.csv"))


def _run_verify(config: ExperimentConfig) -> int:
    cfg, op, u0, f = _problem(config)
    if config.trajectory:
        traj = load_trajectory(Path(config.trajectory), config.grid(), config.time_grid())
    else:
        traj = solve(u0, f, config.time_grid(), op, cfg)
    report = verify_trajectory(
        traj,
        op,
        f,
        heights=config.test_heights,
        entropy_slack=config.entropy_slack,
        subsamples=config.steklov_subsamples,
    )
    return _finish(report, config.output_path("diagnostics.csv"))


def _run_compare(config: ExperimentConfig, other: ExperimentConfig) -> int:
    runs = []
    for current in (config, other):
        cfg, op, u0, f = _problem(current)
        runs.append(solve(u0, f, current.time_grid(), op, cfg))
    report = DiagnosticsReport(metadata={"lower": config.u0 + " | " + config.f, "upper": other.u0 + " | " + other.f})
    report.add(comparison_check(runs[0], runs[1]))
    return _finish(report, config.output_path("comparison.csv"))


def _run_weights(config: ExperimentConfig) -> int:
    op = _operator(config, config.solver_config())
    path = write_weight_profile(op.kw, config.output_path("weights.csv"))
    print(f"weight profile written to {path}")
    return EXIT_OK


def _run_bench(config: ExperimentConfig) -> int:
    cfg = config.solver_config()
    rows = []
    for m in config.bench_sizes:
        sized = config.replace(m=m)
        rng = np.random.default_rng(m)
        for repeat in range(config.bench_repeats):
            start = time.perf_counter()
            op = _operator(sized, cfg)
            rows.append(["assemble", str(m), str(repeat), format_float(time.perf_counter() - start)])
            u = GridFunction(op.grid, rng.standard_normal(m))
            start = time.perf_counter()
            apply(op, u)
            rows.append(["apply", str(m), str(repeat), format_float(time.perf_counter() - start)])
        logger.info(f"Benchmarked m={m} over {config.bench_repeats} repeat(s)")
    path = write_rows(config.output_path("bench.csv"), ["operation", "m", "repeat", "seconds"], rows)
    print(f"timings written to {path}")
    return EXIT_OK


def run(subcommand: str, config: ExperimentConfig, other: Optional[ExperimentConfig] = None) -> int:
    """Execute one subcommand and map its outcome to an exit code."""
    try:
        if subcommand == "solve":
            return _run_solve(config)
        if subcommand == "ladder":
            return _run_ladder(config)
        if subcommand == "verify":
            return _run_verify(config)
        if subcommand == "compare":
            if other is None:
                raise ConfigError("compare needs a second configuration", key="other")
            return _run_compare(config, other)
        if subcommand == "weights":
            return _run_weights(config)
        if subcommand == "bench":
            return _run_bench(config)
        raise ConfigError(f"unknown subcommand '{subcommand}'")
    except (NonlocalRotheError, OSError, ValueError) as e:
        logger.error(f"{subcommand} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


def _defaults_epilog() -> str:
    lines = ["configuration keys (defaults):"]
    for key, value in DEFAULTS.items():
        shown = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value) if isinstance(value, tuple) else value
        lines.append(f"  {key} = {shown}")
    lines.append("environment: NONLOCAL_ROTHE_THREADS caps ladder worker threads")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file or flat JSON object")
    common.add_argument("--log-level", default="INFO", help="Set logging level")
    common.add_argument("--log-file", type=Path, help="Write the log to this file instead of stderr")
    keys = common.add_argument_group("configuration overrides")
    for key in PARSERS:
        keys.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)

    parser = argparse.ArgumentParser(
        prog="nonlocal-rothe",
        description="Implicit Euler solver and verification harness for the fractional p-Laplacian evolution",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        child = sub.add_parser(
            name,
            parents=[common],
            epilog=_defaults_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if name == "compare":
            child.add_argument("--other", type=Path, required=True, help="configuration of the upper run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level, log_file=args.log_file)
    overrides = {key: getattr(args, key) for key in PARSERS if getattr(args, key) is not None}
    try:
        config = parse_config(args.config, overrides)
        other = parse_config(args.other, overrides) if args.subcommand == "compare" else None
    except (ConfigError, OSError) as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return run(args.subcommand, config, other)
