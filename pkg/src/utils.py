import json
import math
import os
import time
import tracemalloc
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

# Component index table for master-seed splitting. Indices are part of the
# reproducibility contract: never renumber, only append.
SEED_COMPONENTS = {
    "data": 0,
    "partition": 1,
    "sampling": 2,
    "client_quantizer": 3,
    "server_quantizer": 4,
    "delays": 5,
    "arrivals": 6,
    "probes": 7,
}


def read_json_as_dict(input_path: str) -> Dict:
    """
    Reads a JSON file and returns its content as a dictionary.
    If input_path is a directory, the first JSON file (sorted by name) in the
    directory is read. If input_path is a file, the file is read.

    Args:
        input_path (str): The path to the JSON file or directory containing a JSON file.

    Returns:
        dict: The content of the JSON file as a dictionary.

    Raises:
        ValueError: If the input_path is neither a file nor a directory,
                    or if input_path is a directory without any JSON files.
    """
    if os.path.isdir(input_path):
        json_files = sorted(
            os.path.join(input_path, f)
            for f in os.listdir(input_path)
            if f.endswith(".json")
        )
        if not json_files:
            raise ValueError("No JSON files found in the directory")
        json_file_path = json_files[0]

    elif os.path.isfile(input_path):
        json_file_path = input_path
    else:
        raise ValueError(f"Input path is neither a file nor a directory: {input_path}")

    with open(json_file_path, "r", encoding="utf-8") as file:
        json_data_as_dict = json.load(file)

    return json_data_as_dict


def format_float(value: float) -> str:
    """Shortest decimal representation that parses back to the same float."""
    return repr(float(value))


def save_dataframe_as_csv(dataframe: pd.DataFrame, file_path: str) -> None:
    """
    Saves a pandas dataframe to a CSV file.

    Float columns are written with full round-trip precision (the shortest
    representation that parses back exactly), so re-running the same
    configuration reproduces the file byte for byte.

    Args:
    - dataframe (pd.DataFrame): The pandas dataframe to be saved.
    - file_path (str): File path and name to save the CSV file.

    Raises:
    - IOError: If an error occurs while saving the CSV file.
    """
    try:
        with open(file_path, "w", encoding="utf-8", newline="") as file:
            file.write(dataframe_to_csv_text(dataframe))
    except IOError as exc:
        raise IOError(f"Error saving CSV file: {exc}") from exc


def dataframe_to_csv_text(dataframe: pd.DataFrame) -> str:
    """CSV text of a dataframe with round-trip float formatting and \\n line ends."""
    formatted = dataframe.copy()
    for column in formatted.columns:
        if pd.api.types.is_float_dtype(formatted[column]):
            formatted[column] = formatted[column].map(format_float)
    return formatted.to_csv(index=False, lineterminator="\n")


def save_json(file_path_and_name: str, data: Any) -> None:
    """Save json to a path (directory + filename)"""
    with open(file_path_and_name, "w", encoding="utf-8") as file:
        json.dump(
            sanitize_for_json(data),
            file,
            default=lambda o: make_serializable(o),
            sort_keys=True,
            indent=4,
            separators=(",", ": "),
            allow_nan=False,
        )


def sanitize_for_json(obj: Any) -> Any:
    """
    Recursively replaces non-finite floats with None so the output is strict JSON.

    Args:
    - obj: Any nested structure of dicts, lists, tuples and scalars.

    Returns:
    - The same structure with inf/nan floats mapped to None.
    """
    if isinstance(obj, dict):
        return {key: sanitize_for_json(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_for_json(value) for value in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return sanitize_for_json(obj.tolist())
    return obj


def make_serializable(obj: Any) -> Union[int, float, List[Union[int, float]], Any]:
    """
    Converts a given object into a serializable format.

    Args:
    - obj: Any Python object

    Returns:
    - If obj is an integer or numpy integer, returns the integer value as an int
    - If obj is a numpy floating-point number, returns the floating-point value
        as a float
    - If obj is a numpy bool, returns a bool
    - If obj is a numpy array, returns the array as a list
    - Otherwise, uses the default behavior of the json.JSONEncoder to serialize obj
    """
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    else:
        return json.JSONEncoder.default(None, obj)


def make_dirs(*dir_paths: str) -> None:
    """Creates each directory (and parents) if it does not exist."""
    for dir_path in dir_paths:
        os.makedirs(dir_path, exist_ok=True)


class SeedStreams:
    """
    Expands one master seed into independent random generators.

    Each component draws from ``SeedSequence(master_seed, spawn_key=(index,))``
    with the index taken from ``SEED_COMPONENTS``. Streams are independent of
    each other, so switching the quantizer leaves the delay sequence untouched.
    """

    def __init__(self, master_seed: int) -> None:
        if not isinstance(master_seed, (int, np.integer)) or master_seed < 0:
            raise ValueError(f"Invalid seed value: {master_seed}. Cannot set seeds.")
        self.master_seed = int(master_seed)

    def seed_sequence(self, component: str) -> np.random.SeedSequence:
        if component not in SEED_COMPONENTS:
            raise KeyError(f"Unknown seed component '{component}'")
        return np.random.SeedSequence(
            self.master_seed, spawn_key=(SEED_COMPONENTS[component],)
        )

    def generator(self, component: str) -> np.random.Generator:
        """Returns a fresh generator for the named component."""
        return np.random.default_rng(self.seed_sequence(component))


class TimeAndMemoryTracker(object):
    """
    This class serves as a context manager to track time and
    memory allocated by code executed inside it.
    """

    def __init__(self, logger):
        self.logger = logger

    def __enter__(self):
        tracemalloc.start()
        self.start_time = time.time()
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.end_time = time.time()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        cpu_memory = peak / (1024 * 1024)
        self.elapsed_time = self.end_time - self.start_time

        self.logger.info(f"Execution time: {self.elapsed_time:.2f} seconds")
        self.logger.info(f"CPU Memory allocated (peak): {cpu_memory:.2f} MB")
