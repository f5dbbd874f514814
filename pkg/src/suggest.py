import argparse
import json
import os
from typing import Any, Dict, Optional

from analysis.theorem import BASE_C_G, BASE_C_L, suggest_stepsizes
from cli_utils import add_common_arguments, config_from_args, exit_with_code, output_dir_for
from config import paths
from data_models.run_config import RunConfig
from logger import get_logger, log_error
from quantizers.contraction import effective_delta
from quantizers.quantizers import QuantizerKind
from sim.simulator import Problem, prepare_problem
from utils import make_dirs, sanitize_for_json, save_json

logger = get_logger(task_name="suggest")


def _problem_if_needed(config: RunConfig, args: argparse.Namespace) -> Optional[Problem]:
    needs_dimension = (
        config.protocol.downlink_quantizer.kind == QuantizerKind.QSGD
        or config.protocol.uplink_quantizer.kind == QuantizerKind.QSGD
    )
    if args.L is not None and not needs_dimension:
        return None
    return prepare_problem(config, cache_dir=config.output.cache_dir or paths.CACHE_DIR)


def run_suggest(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Suggest corollary step sizes that satisfy the convergence conditions

    L defaults to the configured objective's smoothness and the contraction
    parameters to those of the configured quantizers.

    Args:
        args (argparse.Namespace): Parsed command-line arguments.

    Returns:
        dict: The suggestion with its condition report and inputs.
    """
    try:
        logger.info("Starting step-size suggestion...")

        logger.info("Loading run config...")
        config = config_from_args(args)
        out_dir = output_dir_for(config, paths.ANALYSIS_DIR)
        protocol = config.protocol
        T = args.T or config.T

        problem = _problem_if_needed(config, args)
        d = problem.objective.dimension if problem is not None else None
        L = args.L if args.L is not None else problem.objective.lipschitz()
        delta_s = (
            args.delta_s
            if args.delta_s is not None
            else effective_delta(protocol.downlink_quantizer, d).delta
        )
        delta_c = (
            args.delta_c
            if args.delta_c is not None
            else effective_delta(protocol.uplink_quantizer, d).delta
        )

        logger.info(
            f"Suggesting step sizes for K={protocol.K}, P={protocol.P}, T={T}, "
            f"L={L:.6g}, tau_max={args.tau_max}, delta_s={delta_s:.6g}"
        )
        suggestion = suggest_stepsizes(
            K=protocol.K,
            P=protocol.P,
            T=T,
            L=L,
            tau_max=args.tau_max,
            delta_s=delta_s,
            delta_c=delta_c,
            c_l=args.c_l,
            c_g=args.c_g,
        )
        report = {
            "inputs": {
                "K": protocol.K,
                "P": protocol.P,
                "T": T,
                "L": L,
                "tau_max": args.tau_max,
                "delta_s": delta_s,
                "delta_c": delta_c,
            },
            "suggestion": suggestion.dict(),
        }
        make_dirs(out_dir)
        save_json(os.path.join(out_dir, paths.SUGGESTION_FILE_NAME), report)
        print(json.dumps(sanitize_for_json(report), indent=4, sort_keys=True))

        logger.info(
            f"eta_l={suggestion.eta_l:.6g}, eta_g={suggestion.eta_g:.6g} "
            f"after {suggestion.halvings} halvings"
        )
        logger.info("Step-size suggestion completed successfully")
        return report

    except Exception as exc:
        err_msg = "Error occurred during step-size suggestion."
        # Log the error
        logger.error(f"{err_msg} Error: {str(exc)}")
        # Log the error to the separate logging file
        make_dirs(paths.ERRORS_DIR)
        log_error(message=err_msg, error=exc, error_fpath=paths.SUGGEST_ERROR_FILE_PATH)
        # re-raise the error
        raise


def parse_arguments(argv=None) -> argparse.Namespace:
    """Parse the command line arguments of the step-size suggester."""
    parser = argparse.ArgumentParser(
        description="Suggest corollary step sizes that satisfy the convergence conditions."
    )
    add_common_arguments(parser)
    parser.add_argument(
        "--tau-max", type=int, required=True, help="Maximum staleness under buffer size K."
    )
    parser.add_argument("--T", type=int, default=None, help="Horizon (default: config T).")
    parser.add_argument("--L", type=float, default=None, help="Smoothness override.")
    parser.add_argument("--delta-s", type=float, default=None, help="Server delta override.")
    parser.add_argument("--delta-c", type=float, default=None, help="Client delta override.")
    parser.add_argument("--c-l", type=float, default=BASE_C_L, help="Starting c_l.")
    parser.add_argument("--c-g", type=float, default=BASE_C_G, help="Starting c_g.")
    return parser.parse_args(argv)


if __name__ == "__main__":
    args = parse_arguments()
    exit_with_code(lambda: run_suggest(args))
