"""Argument parsing and config resolution shared by the command-line scripts."""
import argparse
import os
import sys
from typing import Any, Callable, Dict

from config import paths
from data_models.run_config import RunConfig, load_run_config, parse_override
from errors import InfeasibleConfigError, exit_code_for


def add_common_arguments(parser: argparse.ArgumentParser) -> argparse.ArgumentParser:
    """Adds --config, --seed, --jobs, --out-dir, --dataset-dir, --metrics-every and --set."""
    parser.add_argument(
        "--config",
        default=paths.DEFAULT_RUN_CONFIG_FILE_PATH,
        help="Run config JSON (nested or dotted keys). Bare file names are "
        "looked up in the inputs/configs directory.",
    )
    parser.add_argument("--seed", type=int, default=None, help="Master seed.")
    parser.add_argument(
        "--jobs", type=int, default=1, help="Parallel simulations (joblib n_jobs)."
    )
    parser.add_argument("--out-dir", default=None, help="Output directory.")
    parser.add_argument(
        "--dataset-dir", default=None, help="Directory holding LIBSVM datasets."
    )
    parser.add_argument(
        "--metrics-every",
        type=int,
        default=None,
        help="Emit a metrics row every N server steps (and always at T).",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config field by dotted path, e.g. protocol.K=10. Repeatable.",
    )
    return parser


def resolve_config_path(config_path: str) -> str:
    """Returns config_path, or its location under the inputs/configs directory."""
    if os.path.isfile(config_path):
        return config_path
    candidate = os.path.join(paths.INPUT_CONFIG_DIR, config_path)
    if os.path.isfile(candidate):
        return candidate
    raise InfeasibleConfigError(
        f"config file '{config_path}' not found (also looked in {paths.INPUT_CONFIG_DIR})"
    )


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-key overrides from --set followed by the dedicated flags."""
    overrides: Dict[str, Any] = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.metrics_every is not None:
        overrides["metrics.every"] = args.metrics_every
    if args.dataset_dir is not None:
        overrides["output.dataset_dir"] = args.dataset_dir
    if args.out_dir is not None:
        overrides["output.out_dir"] = args.out_dir
    return overrides


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Loads the --config file and applies every override flag."""
    return load_run_config(resolve_config_path(args.config), collect_overrides(args))


def output_dir_for(config: RunConfig, default_dir: str) -> str:
    return config.output.out_dir or default_dir


def exit_with_code(task: Callable[[], Any]) -> None:
    """Runs a script task and exits with the code mapped from its exception."""
    try:
        task()
    except Exception as exc:  # pylint: disable=broad-except
        sys.exit(exit_code_for(exc))
    sys.exit(0)
