import argparse
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy
from pydantic import ValidationError

from penkf import __author__, __version__
from penkf.core import PenkfError
from penkf.logger import configure_logging, get_logger
from penkf.models import ExperimentConfig, FilterKind, FilterSpec, PathResult, SummaryTable, TrialResult

logger = get_logger(__name__)

HEADER = "\n".join(
    [
        r"    ___  ____  _  __ __ __ ____",
        r"   / _ \/ __/ / |/ // //_// __/",
        r"  / ___/ _/  /    // ,<  / _/  ",
        r" /_/  /___/ /_/|_//_/|_|/_/    ",
        "",
        f" ver. {__version__}     author {__author__}",
        "",
    ]
)

SUMMARY_HEADER = ["method", "q10", "q50", "mean", "q90", "sd_q10", "sd_q50", "sd_mean", "sd_q90", "divergent"]
PATH_HEADER = ["c", "lambda", "edges", "loglik", "score", "kkt_residual"]


def get_parser():
    parser = argparse.ArgumentParser(prog="penkf")

    subparsers = parser.add_subparsers(dest="command", help="penkf sub-commands")
    subparsers.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--trials", type=int, help="override the number of trials")
    common.add_argument("--cycles", type=int, help="override the number of assimilation cycles")
    common.add_argument("--out", help="output root, results go to <out>/<experiment name>")
    common.add_argument("--threads", type=int, help="worker threads, 1 runs trials inline")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="console log level")
    common.add_argument("--clean", action="store_true", help="delete earlier artifacts of this experiment first")

    subparsers.add_parser("run", parents=[common], help="Run every configured method and summarize RMSE")
    subparsers.add_parser("select", parents=[common], help="Penalty path and information criterion report")

    profile = subparsers.add_parser("profile", parents=[common], help="Average normalized precision row profile")
    profile.add_argument("--half-width", type=int, help="largest offset in the profile")
    profile.add_argument("--dump-dir", help="also write every precision snapshot as MatrixMarket")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Mean RMSE over state dimensions")
    sweep.add_argument("--p", type=int, nargs="+", required=True, help="even state dimensions")

    gain = subparsers.add_parser("gain-error", parents=[common], help="Gain errors against a large reference ensemble")
    gain.add_argument("--reference-n", type=int, default=2000, help="reference ensemble size")

    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise FileNotFoundError(f"config file not found: {config_path}")
        cfg = ExperimentConfig.parse_file(config_path)
    else:
        cfg = ExperimentConfig()

    overrides: Dict = {}
    for key in ("seed", "trials", "cycles"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        # re-parse so overrides are validated too
        cfg = ExperimentConfig.parse_obj({**cfg.dict(), **overrides})
    return cfg


def _storage(cfg: ExperimentConfig):
    from penkf.storage import ResultStorage

    return ResultStorage(cfg.name, root=cfg.output_dir)


def _metadata(command: str, cfg: ExperimentConfig, threads: Optional[int], wall_time: float, **extra) -> Dict:
    return {
        "command": command,
        "experiment": cfg.name,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "threads": threads,
        "wall_time": wall_time,
        "versions": {
            "penkf": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }


def _summary_rows(table: SummaryTable) -> List[List]:
    return [[getattr(row, column) for column in SUMMARY_HEADER] for row in table.rows]


def _path_rows(path: PathResult) -> List[List]:
    return [[pt.c, pt.lam, pt.edges, pt.loglik, pt.score, pt.kkt_residual] for pt in path.points]


def print_summary(table: SummaryTable) -> None:
    print(f"{'method':<12}{'q10':>10}{'q50':>10}{'mean':>10}{'q90':>10}{'divergent':>11}")
    for row in table.rows:
        cells = [f"{v:>10.4f}" if v is not None else f"{'-':>10}" for v in (row.q10, row.q50, row.mean, row.q90)]
        print(f"{row.method:<12}{''.join(cells)}{row.divergent:>11}")


def print_path(path: PathResult) -> None:
    print(f"criterion {path.criterion} (gamma={path.gamma}), p={path.p}, n={path.n}")
    print(f"  {'c':>10}{'lambda':>12}{'edges':>8}{'score':>16}")
    for i, pt in enumerate(path.points):
        flag = "*" if i == path.chosen_index else " "
        edges = "-" if pt.edges is None else str(pt.edges)
        score = "not converged" if pt.score is None else f"{pt.score:.6g}"
        print(f"{flag} {pt.c:>10.4g}{pt.lam:>12.4g}{edges:>8}{score:>16}")


def write_run(storage, cfg: ExperimentConfig, results: Sequence[TrialResult], paths: Dict[str, PathResult]) -> SummaryTable:
    from penkf.experiment import summarize

    for spec in cfg.methods:
        rows = [
            [result.trial, cycle, value]
            for result in results
            if result.method == spec.name
            for cycle, value in enumerate(result.rmse_series, start=1)
        ]
        storage.put_csv(f"series_{spec.name}.csv", ["trial", "cycle", "rmse"], rows)
    for name, path in paths.items():
        storage.put_csv(f"path_{name}.csv", PATH_HEADER, _path_rows(path))

    table = summarize(results)
    storage.put_csv("summary.csv", SUMMARY_HEADER, _summary_rows(table))
    return table


def command_run(args, cfg: ExperimentConfig) -> None:
    from penkf.worker import execute

    started = time.perf_counter()
    results, paths = execute(cfg, threads=args.threads)
    storage = _storage(cfg)
    table = write_run(storage, cfg, results, paths)
    resolved = cfg.copy(update={"methods": [_resolved_spec(spec, paths) for spec in cfg.methods]})
    storage.put_json("config.json", resolved)
    storage.put_json("metadata.json", _metadata("run", cfg, args.threads, time.perf_counter() - started))
    print_summary(table)


def _resolved_spec(spec: FilterSpec, paths: Dict[str, PathResult]) -> FilterSpec:
    if spec.name in paths:
        return spec.copy(update={"c_lambda": paths[spec.name].chosen.c})
    return spec


def _penkf_spec(cfg: ExperimentConfig) -> FilterSpec:
    return next((spec for spec in cfg.methods if spec.kind == FilterKind.PENKF), FilterSpec(kind=FilterKind.PENKF))


def command_select(args, cfg: ExperimentConfig) -> None:
    from penkf.experiment import path_config, selection_ensemble
    from penkf.selection import select_penalty

    started = time.perf_counter()
    spec = _penkf_spec(cfg)
    representative = selection_ensemble(cfg, cfg.model.build())
    _, path = select_penalty(representative, path_config(cfg, spec))
    storage = _storage(cfg)
    storage.put_csv("path.csv", PATH_HEADER, _path_rows(path))
    storage.put_json("path.json", path)
    storage.put_json("metadata.json", _metadata("select", cfg, None, time.perf_counter() - started))
    print_path(path)


def command_profile(args, cfg: ExperimentConfig) -> None:
    from penkf.experiment import precision_profile, trial_snapshots
    from penkf.glasso import write_matrix_market
    from penkf.worker import execute

    started = time.perf_counter()
    cfg = cfg.copy(update={"methods": [_penkf_spec(cfg)]})
    results, paths = execute(cfg, threads=args.threads)
    half_width = args.half_width if args.half_width is not None else cfg.profile_half_width
    snapshots = trial_snapshots([result for result in results if not result.diverged])
    profile = precision_profile(snapshots, half_width)

    storage = _storage(cfg)
    storage.put_csv("profile.csv", ["offset", "mean_normalized_value"], zip(profile.offsets, profile.values))
    if args.dump_dir is not None:
        dump_dir = Path(args.dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for result in results:
            for cycle, theta in sorted(result.precision_snapshots.items()):
                write_matrix_market(theta, Path(dump_dir, f"theta_trial{result.trial}_cycle{cycle}.mtx"))
    storage.put_json(
        "metadata.json",
        _metadata("profile", cfg, args.threads, time.perf_counter() - started, snapshots=profile.snapshots),
    )
    for offset, value in zip(profile.offsets, profile.values):
        print(f"{offset:>5} {value: .4f}")


def command_sweep(args, cfg: ExperimentConfig) -> None:
    from functools import partial

    from penkf.experiment import dimension_sweep
    from penkf.worker import execute

    started = time.perf_counter()
    sweep = dimension_sweep(cfg, args.p, runner=partial(execute, threads=args.threads))
    rows = [
        [point.p, row.method, row.mean, row.ci_low, row.ci_high, row.trials, row.divergent]
        for point in sweep.points
        for row in point.summary.rows
    ]
    storage = _storage(cfg)
    storage.put_csv("sweep.csv", ["p", "method", "mean", "ci_low", "ci_high", "trials", "divergent"], rows)
    storage.put_json("metadata.json", _metadata("sweep", cfg, args.threads, time.perf_counter() - started, p=args.p))
    for point in sweep.points:
        print(f"p={point.p}")
        print_summary(point.summary)


def command_gain_error(args, cfg: ExperimentConfig) -> None:
    from penkf.experiment import gain_error_experiment

    started = time.perf_counter()
    result = gain_error_experiment(cfg, args.reference_n)
    rows = [[row.trial, row.sse_sample, row.sse_tapered, row.sse_penalized] for row in result.rows]
    storage = _storage(cfg)
    storage.put_csv("gain_error.csv", ["trial", "sse_sample", "sse_tapered", "sse_penalized"], rows)
    storage.put_json(
        "metadata.json",
        _metadata(
            "gain-error",
            cfg,
            None,
            time.perf_counter() - started,
            reference_n=args.reference_n,
            fraction_penalized_better=result.fraction_penalized_better,
        ),
    )
    print(f"mean SSE: {result.mean_sse()}")
    print(f"penalized gain beats the sample gain in {result.fraction_penalized_better:.0%} of trials")


COMMANDS = {
    "run": command_run,
    "select": command_select,
    "profile": command_profile,
    "sweep": command_sweep,
    "gain-error": command_gain_error,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = get_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return int(e.code or 0)

    if args.log_level is not None:
        configure_logging(args.log_level)

    try:
        cfg = load_config(args)
        if args.clean:
            _storage(cfg).clear()
        COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        print(f"penkf: {e}", file=sys.stderr)
        return 2
    except ValidationError as e:
        print(f"penkf: invalid config\n{e}", file=sys.stderr)
        return 2
    except (PenkfError, ValueError) as e:
        print(f"penkf: {e}", file=sys.stderr)
        return 2
    return 0


def cli():
    print(HEADER)
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    cli()
