import os

# Path to the root directory which contains the src directory
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Path into the experiment volume:
#   set to environment variable QAFEL_INPUTS_OUTPUTS_PATH if it exists
#   else: set to default path which would be <path_to_root>/experiment_inputs_outputs/
EXPERIMENT_INPUTS_OUTPUTS = os.environ.get(
    "QAFEL_INPUTS_OUTPUTS_PATH", os.path.join(ROOT_DIR, "experiment_inputs_outputs/")
)

# Path to inputs
INPUT_DIR = os.path.join(EXPERIMENT_INPUTS_OUTPUTS, "inputs")
# Path to user run configs
INPUT_CONFIG_DIR = os.path.join(INPUT_DIR, "configs")
# Path to dataset directory (LIBSVM files such as mushrooms live here)
DATASETS_DIR = os.path.join(INPUT_DIR, "datasets")

# Path to cache directory (f* values, checksums)
CACHE_DIR = os.path.join(EXPERIMENT_INPUTS_OUTPUTS, "cache")

# Path to outputs
OUTPUT_DIR = os.path.join(EXPERIMENT_INPUTS_OUTPUTS, "outputs")
# Path to single-run outputs
RUNS_DIR = os.path.join(OUTPUT_DIR, "runs")
# Path to sweep outputs
SWEEPS_DIR = os.path.join(OUTPUT_DIR, "sweeps")
# Path to verification reports
VERIFY_DIR = os.path.join(OUTPUT_DIR, "verify")
# Path to constants and step-size reports
ANALYSIS_DIR = os.path.join(OUTPUT_DIR, "analysis")

# Path to logs directory inside outputs directory
ERRORS_DIR = os.path.join(OUTPUT_DIR, "errors")
# Error file paths
RUN_ERROR_FILE_PATH = os.path.join(ERRORS_DIR, "run_error.txt")
SWEEP_ERROR_FILE_PATH = os.path.join(ERRORS_DIR, "sweep_error.txt")
VERIFY_ERROR_FILE_PATH = os.path.join(ERRORS_DIR, "verify_error.txt")
CONSTANTS_ERROR_FILE_PATH = os.path.join(ERRORS_DIR, "constants_error.txt")
SUGGEST_ERROR_FILE_PATH = os.path.join(ERRORS_DIR, "suggest_error.txt")

# Paths inside the source directory
# Path to source directory
SRC_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Path to config directory
CONFIG_DIR = os.path.join(SRC_DIR, "config")
# Path to the default run config (the logistic-regression setting)
DEFAULT_RUN_CONFIG_FILE_PATH = os.path.join(CONFIG_DIR, "default_run_config.json")
# Path to acceptance-suite sizes
VERIFY_CONFIG_FILE_PATH = os.path.join(CONFIG_DIR, "verify_config.json")

# Name of the mushrooms dataset file expected inside DATASETS_DIR
MUSHROOMS_FILE_NAME = "mushrooms"

# Output file names
METRICS_FILE_NAME = "metrics.csv"
SUMMARY_FILE_NAME = "summary.json"
RUN_CONFIG_FILE_NAME = "run_config.json"
SWEEP_RUNS_FILE_NAME = "sweep_runs.csv"
SWEEP_SUMMARY_FILE_NAME = "sweep_summary.csv"
CONSTANTS_FILE_NAME = "constants.json"
SUGGESTION_FILE_NAME = "suggested_stepsizes.json"
VERIFY_REPORT_FILE_NAME = "verify_{suite}.json"
