import argparse
import json
import os
from typing import Any, Dict

from cli_utils import add_common_arguments, config_from_args, exit_with_code, output_dir_for
from config import paths
from logger import get_logger, log_error
from objectives.objectives import estimate_constants
from sim.simulator import prepare_problem
from utils import SeedStreams, TimeAndMemoryTracker, make_dirs, sanitize_for_json, save_json

logger = get_logger(task_name="constants")

DEFAULT_PROBES = 5


def run_constants(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Estimate L, sigma^2, B and f* of the configured problem and print them

    Args:
        args (argparse.Namespace): Parsed command-line arguments.

    Returns:
        dict: The estimated constants, the oracle result and the problem size.
    """
    try:
        logger.info("Starting constant estimation...")

        logger.info("Loading run config...")
        config = config_from_args(args)
        out_dir = output_dir_for(config, paths.ANALYSIS_DIR)
        batch_size = args.batch_size or config.protocol.batch_size

        logger.info("Preparing problem and solving for f*...")
        problem = prepare_problem(config, cache_dir=config.output.cache_dir or paths.CACHE_DIR)

        logger.info(f"Estimating constants over {args.probes} probe points...")
        with TimeAndMemoryTracker(logger) as _:
            constants = estimate_constants(
                config.objective,
                problem.dataset,
                problem.shards,
                probes=args.probes,
                rng=SeedStreams(config.seed).generator("probes"),
                batch_size=batch_size,
                oracle=problem.oracle,
            )

        report = {
            "dataset": problem.dataset.name,
            "rows": problem.dataset.num_rows,
            "features": problem.dataset.num_features,
            "clients": problem.objective.num_clients,
            "l2_strength": problem.objective.l2,
            "constants": constants.dict(),
            "oracle": {
                "f_star": problem.oracle.f_star,
                "grad_norm": problem.oracle.grad_norm,
                "iterations": problem.oracle.iterations,
                "converged": problem.oracle.converged,
            },
        }
        make_dirs(out_dir)
        save_json(os.path.join(out_dir, paths.CONSTANTS_FILE_NAME), report)
        print(json.dumps(sanitize_for_json(report), indent=4, sort_keys=True))

        logger.info("Constant estimation completed successfully")
        return report

    except Exception as exc:
        err_msg = "Error occurred during constant estimation."
        # Log the error
        logger.error(f"{err_msg} Error: {str(exc)}")
        # Log the error to the separate logging file
        make_dirs(paths.ERRORS_DIR)
        log_error(message=err_msg, error=exc, error_fpath=paths.CONSTANTS_ERROR_FILE_PATH)
        # re-raise the error
        raise


def parse_arguments(argv=None) -> argparse.Namespace:
    """Parse the command line arguments of the constants estimator."""
    parser = argparse.ArgumentParser(
        description="Estimate smoothness, gradient noise, heterogeneity and f*."
    )
    add_common_arguments(parser)
    parser.add_argument(
        "--probes", type=int, default=DEFAULT_PROBES, help="Number of probe points."
    )
    parser.add_argument(
        "--batch-size",
        type=int,
        default=None,
        help="Minibatch size for the variance (default: protocol.batch_size).",
    )
    return parser.parse_args(argv)


if __name__ == "__main__":
    args = parse_arguments()
    exit_with_code(lambda: run_constants(args))
