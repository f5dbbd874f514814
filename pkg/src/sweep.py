import argparse
import itertools
import json
import os
import re
from typing import Any, Dict, List, Sequence, Tuple

import pandas as pd
from joblib import Parallel, delayed

from cli_utils import add_common_arguments, config_from_args, exit_with_code, output_dir_for
from config import paths
from data_models.run_config import (
    RunConfig,
    apply_overrides,
    parse_value,
    validate_sweep_axes,
)
from errors import SweepAxisError
from logger import get_logger, log_error
from run import execute_run
from sim.simulator import Problem, prepare_problem
from utils import TimeAndMemoryTracker, make_dirs, save_dataframe_as_csv

logger = get_logger(task_name="sweep")

SUMMARY_METRICS = [
    "final_f_minus_fstar",
    "final_ergodic_grad_norm_sq",
    "steps_to_half",
    "plateau_f_minus_fstar",
    "uploads",
    "upload_bytes",
    "download_bytes",
]

Axis = Tuple[str, List[Any]]


def build_axes(axis_paths: Sequence[str], value_lists: Sequence[Sequence[str]]) -> List[Axis]:
    """
    Pairs each --axis with its --values list, parsing values as JSON.

    Raises:
        SweepAxisError: Missing axes, mismatched counts, unknown fields or
            empty value lists.
    """
    if not axis_paths:
        raise SweepAxisError("a sweep needs at least one --axis")
    if len(axis_paths) != len(value_lists):
        raise SweepAxisError(
            f"{len(axis_paths)} axes but {len(value_lists)} value lists; "
            "give one --values per --axis"
        )
    axes = [
        (path, [parse_value(v) for v in values])
        for path, values in zip(axis_paths, value_lists)
    ]
    validate_sweep_axes(axes)
    return axes


def _label(value: Any) -> str:
    text = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text)


def _cell(value: Any) -> Any:
    return json.dumps(value, sort_keys=True) if isinstance(value, (dict, list)) else value


def expand_grid(
    base: RunConfig, axes: List[Axis], seeds: Sequence[int]
) -> List[Tuple[Dict[str, Any], RunConfig, str]]:
    """
    The cartesian product of axis values (first axis outermost) times seeds.

    Returns:
        List of (axis values, config, run directory relative to the sweep dir).
    """
    grid = []
    for combo in itertools.product(*(values for _, values in axes)):
        point = {path: value for (path, _), value in zip(axes, combo)}
        point_dir = "__".join(f"{path}={_label(value)}" for path, value in point.items())
        for seed in seeds:
            config = apply_overrides(base, {**point, "seed": seed})
            grid.append((point, config, os.path.join(point_dir, f"seed_{seed}")))
    return grid


def _problem_key(config: RunConfig) -> str:
    return json.dumps(
        {"objective": json.loads(config.objective.json()), "data": json.loads(config.data.json())},
        sort_keys=True,
    )


def _run_point(
    point: Dict[str, Any], config: RunConfig, problem: Problem, run_dir: str
) -> Dict[str, Any]:
    summary = execute_run(config, run_dir, problem)
    final = summary["final"]
    return {
        **{path: _cell(value) for path, value in point.items()},
        "seed": config.seed,
        "final_f_minus_fstar": final["f_minus_fstar"],
        "final_ergodic_grad_norm_sq": final["ergodic_grad_norm_sq"],
        "steps_to_half": summary["steps_to_half"],
        "plateau_f_minus_fstar": summary["plateau_f_minus_fstar"],
        "uploads": final["uploads"],
        "upload_bytes": final["upload_bytes"],
        "download_bytes": final["download_bytes"],
        "diverged": summary["diverged"],
        "converged": summary["converged"],
    }


def summarize_sweep(runs: pd.DataFrame, axis_paths: Sequence[str]) -> pd.DataFrame:
    """
    Mean and population standard deviation over seeds of every summary metric,
    one row per axis point in grid order.
    """
    numeric = runs.copy()
    for metric in SUMMARY_METRICS:
        numeric[metric] = pd.to_numeric(numeric[metric], errors="coerce").astype(float)
    grouped = numeric.groupby(list(axis_paths), sort=False, dropna=False)
    frames = {"runs": grouped["seed"].count()}
    for metric in SUMMARY_METRICS:
        frames[f"{metric}_mean"] = grouped[metric].mean()
        frames[f"{metric}_std"] = grouped[metric].std(ddof=0)
    summary = pd.DataFrame(frames).reset_index()
    summary["runs"] = summary["runs"].astype("int64")
    return summary


def run_sweep(args: argparse.Namespace) -> pd.DataFrame:
    """
    Run the cartesian sweep over axis values and seeds

    Every (point, seed) writes its own run directory; the combined tables are
    assembled after all runs finish.

    Args:
        args (argparse.Namespace): Parsed command-line arguments.

    Returns:
        pd.DataFrame: The combined sweep summary.
    """
    try:
        logger.info("Starting sweep...")

        logger.info("Loading base config and axes...")
        base = config_from_args(args)
        axes = build_axes(args.axis, args.values)
        seeds = args.seeds if args.seeds else [base.seed]
        sweep_dir = output_dir_for(base, paths.SWEEPS_DIR)
        grid = expand_grid(base, axes, seeds)
        logger.info(f"{len(grid)} runs over axes {[path for path, _ in axes]} and seeds {seeds}")

        logger.info("Preparing problems...")
        problems: Dict[str, Problem] = {}
        for _, config, _ in grid:
            key = _problem_key(config)
            if key not in problems:
                problems[key] = prepare_problem(
                    config, cache_dir=config.output.cache_dir or paths.CACHE_DIR
                )

        logger.info("Simulating...")
        with TimeAndMemoryTracker(logger) as _:
            rows = Parallel(n_jobs=args.jobs)(
                delayed(_run_point)(
                    point, config, problems[_problem_key(config)], os.path.join(sweep_dir, run_dir)
                )
                for point, config, run_dir in grid
            )

        logger.info("Saving sweep tables...")
        make_dirs(sweep_dir)
        runs = pd.DataFrame(rows)
        save_dataframe_as_csv(runs, os.path.join(sweep_dir, paths.SWEEP_RUNS_FILE_NAME))
        summary = summarize_sweep(runs, [path for path, _ in axes])
        save_dataframe_as_csv(summary, os.path.join(sweep_dir, paths.SWEEP_SUMMARY_FILE_NAME))

        logger.info(f"Sweep summary:\n{summary.to_string(index=False)}")
        logger.info("Sweep completed successfully")
        return summary

    except Exception as exc:
        err_msg = "Error occurred during sweep."
        # Log the error
        logger.error(f"{err_msg} Error: {str(exc)}")
        # Log the error to the separate logging file
        make_dirs(paths.ERRORS_DIR)
        log_error(message=err_msg, error=exc, error_fpath=paths.SWEEP_ERROR_FILE_PATH)
        # re-raise the error
        raise


def parse_arguments(argv=None) -> argparse.Namespace:
    """Parse the command line arguments of a parameter sweep."""
    parser = argparse.ArgumentParser(
        description="Run a cartesian parameter sweep over seeds and summarize it."
    )
    add_common_arguments(parser)
    parser.add_argument(
        "--axis",
        action="append",
        default=[],
        help="Dotted config path to sweep, e.g. protocol.P. Repeatable.",
    )
    parser.add_argument(
        "--values",
        action="append",
        nargs="*",
        default=[],
        help="Values for the preceding --axis (JSON literals). Repeatable.",
    )
    parser.add_argument(
        "--seeds", type=int, nargs="+", default=None, help="Run seeds (default: config seed)."
    )
    return parser.parse_args(argv)


if __name__ == "__main__":
    args = parse_arguments()
    exit_with_code(lambda: run_sweep(args))
