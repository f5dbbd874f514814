import argparse
import os
from typing import Any, Dict, Optional

from analysis.reports import summarize_run
from cli_utils import add_common_arguments, config_from_args, exit_with_code, output_dir_for
from config import paths
from data_models.metrics_data_model import validate_metrics
from data_models.run_config import RunConfig, serialize_run_config
from logger import get_logger, log_error
from sim.simulator import Problem, SimulationResult, prepare_problem, run_simulation
from utils import TimeAndMemoryTracker, make_dirs, save_dataframe_as_csv, save_json

logger = get_logger(task_name="run")


def save_run_outputs(
    out_dir: str, config: RunConfig, result: SimulationResult, summary: Dict[str, Any]
) -> None:
    """Writes metrics.csv, summary.json and the resolved run_config.json."""
    make_dirs(out_dir)
    metrics = validate_metrics(result.to_frame(), config.T)
    save_dataframe_as_csv(metrics, os.path.join(out_dir, paths.METRICS_FILE_NAME))
    save_json(os.path.join(out_dir, paths.SUMMARY_FILE_NAME), summary)
    with open(os.path.join(out_dir, paths.RUN_CONFIG_FILE_NAME), "w", encoding="utf-8") as file:
        file.write(serialize_run_config(config))
        file.write("\n")


def execute_run(
    config: RunConfig, out_dir: str, problem: Optional[Problem] = None
) -> Dict[str, Any]:
    """
    Simulates one config and writes its outputs.

    Args:
        config (RunConfig): The experiment.
        out_dir (str): Directory for metrics, summary and config echo.
        problem (Problem, optional): Prepared problem shared across runs.

    Returns:
        dict: The run summary.
    """
    if problem is None:
        problem = prepare_problem(
            config, cache_dir=config.output.cache_dir or paths.CACHE_DIR
        )
    result = run_simulation(config, problem)
    summary = summarize_run(config, problem, result)
    save_run_outputs(out_dir, config, result, summary)
    return summary


def run_experiment(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Run one simulation from the command line and save its outputs

    Args:
        args (argparse.Namespace): Parsed command-line arguments.

    Returns:
        dict: The run summary.
    """
    try:
        logger.info("Starting run...")

        logger.info("Loading run config...")
        config = config_from_args(args)
        out_dir = output_dir_for(config, paths.RUNS_DIR)

        logger.info("Simulating...")
        with TimeAndMemoryTracker(logger) as _:
            summary = execute_run(config, out_dir)

        final = summary["final"]
        logger.info(
            f"Final f - f* = {final['f_minus_fstar']:.6g} "
            f"(initial {summary['initial']['f_minus_fstar']:.6g}), "
            f"diverged={summary['diverged']}, converged={summary['converged']}"
        )
        logger.info(f"Outputs written to {out_dir}")
        logger.info("Run completed successfully")
        return summary

    except Exception as exc:
        err_msg = "Error occurred during run."
        # Log the error
        logger.error(f"{err_msg} Error: {str(exc)}")
        # Log the error to the separate logging file
        make_dirs(paths.ERRORS_DIR)
        log_error(message=err_msg, error=exc, error_fpath=paths.RUN_ERROR_FILE_PATH)
        # re-raise the error
        raise


def parse_arguments(argv=None) -> argparse.Namespace:
    """Parse the command line arguments of a single run."""
    parser = argparse.ArgumentParser(
        description="Simulate one quantized asynchronous FL run and write its metrics."
    )
    add_common_arguments(parser)
    return parser.parse_args(argv)


if __name__ == "__main__":
    args = parse_arguments()
    exit_with_code(lambda: run_experiment(args))
