import argparse
import os

from cli_utils import exit_with_code
from config import paths
from errors import VerificationFailedError
from logger import get_logger, log_error
from utils import TimeAndMemoryTracker, make_dirs, read_json_as_dict, save_json
from verification.suites import SUITES, SuiteReport, log_criteria, run_suite

logger = get_logger(task_name="verify")


def run_verification(args: argparse.Namespace) -> SuiteReport:
    """
    Run one acceptance suite and write its report

    Args:
        args (argparse.Namespace): Parsed command-line arguments.

    Returns:
        SuiteReport: Every criterion with its measured value.

    Raises:
        VerificationFailedError: At least one criterion failed.
    """
    try:
        logger.info(f"Starting verification suite '{args.suite}'...")

        logger.info("Loading verification config...")
        verify_config = read_json_as_dict(args.config)
        if args.seed is not None:
            verify_config["quantizers"]["seed"] = args.seed
            verify_config["figures"]["seeds"] = [
                args.seed + s for s in verify_config["figures"]["seeds"]
            ]

        with TimeAndMemoryTracker(logger) as _:
            report = run_suite(
                args.suite,
                verify_config,
                dataset_dir=args.dataset_dir,
                cache_dir=paths.CACHE_DIR,
                jobs=args.jobs,
            )
        log_criteria(report)

        make_dirs(args.out_dir)
        report_path = os.path.join(
            args.out_dir, paths.VERIFY_REPORT_FILE_NAME.format(suite=args.suite)
        )
        save_json(report_path, report.dict())
        logger.info(f"Report written to {report_path}")

        if not report.passed:
            raise VerificationFailedError(
                f"suite '{args.suite}' failed: {report.failed()}",
                report=report.dict(),
            )
        logger.info(f"Verification suite '{args.suite}' passed")
        return report

    except Exception as exc:
        err_msg = "Error occurred during verification."
        # Log the error
        logger.error(f"{err_msg} Error: {str(exc)}")
        # Log the error to the separate logging file
        make_dirs(paths.ERRORS_DIR)
        log_error(message=err_msg, error=exc, error_fpath=paths.VERIFY_ERROR_FILE_PATH)
        # re-raise the error
        raise


def parse_arguments(argv=None) -> argparse.Namespace:
    """Parse the command line arguments of the verification runner."""
    parser = argparse.ArgumentParser(description="Run one acceptance suite.")
    parser.add_argument("--suite", choices=SUITES, required=True, help="Suite to run.")
    parser.add_argument(
        "--config",
        default=paths.VERIFY_CONFIG_FILE_PATH,
        help="Verification sizes and tolerances (JSON).",
    )
    parser.add_argument("--jobs", type=int, default=1, help="Parallel simulation workers.")
    parser.add_argument("--out-dir", default=paths.VERIFY_DIR, help="Report directory.")
    parser.add_argument(
        "--dataset-dir", default=None, help="Directory holding the mushrooms file."
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="Offset for the quantizer and figure seeds."
    )
    return parser.parse_args(argv)


if __name__ == "__main__":
    args = parse_arguments()
    exit_with_code(lambda: run_verification(args))
