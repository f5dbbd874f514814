import json
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ValidationError, root_validator, validator

from errors import InfeasibleConfigError, SweepAxisError
from objectives.datasets import PartitionKind, WeightKind
from objectives.objectives import ObjectiveKind, ObjectiveSpec
from protocol.protocol import ProtocolConfig
from sim.events import ArrivalKind, ArrivalModel, DelayModel
from utils import read_json_as_dict


class DatasetSourceKind(str, Enum):
    """Enum for where the training rows come from"""

    MUSHROOMS = "mushrooms"
    LIBSVM = "libsvm"
    SYNTHETIC = "synthetic"


class DataConfig(BaseModel):
    """
    Dataset source and client split. ``seed`` drives data synthesis and the
    partition, so every run seed trains on the same shards.
    """

    source: DatasetSourceKind = DatasetSourceKind.MUSHROOMS
    path: Optional[str] = None
    n_clients: int = 100
    partition: PartitionKind = PartitionKind.UNIFORM
    dirichlet_alpha: Optional[float] = None
    weights: WeightKind = WeightKind.SIZE
    synthetic_rows: int = 8000
    synthetic_features: int = 112
    synthetic_label_noise: float = 0.0
    fallback_to_synthetic: bool = False
    seed: int = 0

    class Config:
        extra = "forbid"

    @validator("n_clients", "synthetic_rows", "synthetic_features", allow_reuse=True)
    def at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1. Given {v}")
        return v

    @validator("synthetic_label_noise", allow_reuse=True)
    def noise_below_half(cls, v):
        if not 0.0 <= v < 0.5:
            raise ValueError(f"synthetic_label_noise must lie in [0, 0.5). Given {v}")
        return v

    @validator("seed", allow_reuse=True)
    def non_negative_seed(cls, v):
        if v < 0:
            raise ValueError(f"seed must be non-negative. Given {v}")
        return v

    @root_validator(skip_on_failure=True, allow_reuse=True)
    def partition_needs_alpha(cls, values):
        alpha = values.get("dirichlet_alpha")
        if values["partition"] == PartitionKind.DIRICHLET and (alpha is None or alpha <= 0):
            raise ValueError(f"dirichlet partition requires dirichlet_alpha > 0. Given {alpha}")
        if values["source"] == DatasetSourceKind.LIBSVM and not values.get("path"):
            raise ValueError("libsvm source requires a path")
        return values


class MetricsConfig(BaseModel):
    """Observer cadence: a row every ``every`` server steps and at T."""

    every: int = 1

    class Config:
        extra = "forbid"

    @validator("every", allow_reuse=True)
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError(f"metrics cadence must be at least 1. Given {v}")
        return v


class OutputConfig(BaseModel):
    out_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    cache_dir: Optional[str] = None

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    """
    A self-contained experiment description. The defaults are the
    logistic-regression setting: 100 clients, K=10, eta_l=2, eta_g=0.1,
    half-normal delays and 500 server steps.
    """

    objective: ObjectiveSpec = ObjectiveSpec()
    data: DataConfig = DataConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    arrival: ArrivalModel = ArrivalModel()
    delay: DelayModel = DelayModel()
    metrics: MetricsConfig = MetricsConfig()
    T: int = 500
    seed: int = 0
    output: OutputConfig = OutputConfig()

    class Config:
        extra = "forbid"

    @validator("T", allow_reuse=True)
    def positive_steps(cls, v):
        if v < 1:
            raise ValueError(f"T must be at least 1. Given {v}")
        return v

    @validator("seed", allow_reuse=True)
    def non_negative_seed(cls, v):
        if v < 0:
            raise ValueError(f"seed must be non-negative. Given {v}")
        return v

    @root_validator(skip_on_failure=True, allow_reuse=True)
    def arrival_fits_population(cls, values):
        arrival, data = values["arrival"], values["data"]
        if arrival.kind == ArrivalKind.FIXED_POOL and arrival.pool_size > data.n_clients:
            raise ValueError(
                f"pool_size {arrival.pool_size} exceeds the {data.n_clients} client shards"
            )
        if (
            values["objective"].kind == ObjectiveKind.QUADRATIC
            and data.source != DatasetSourceKind.SYNTHETIC
        ):
            raise ValueError("the quadratic objective runs on synthetic data only")
        return values


def flatten_dict(nested: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """{"a": {"b": 1}} -> {"a.b": 1}"""
    flat = {}
    for key, value in nested.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            flat.update(flatten_dict(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def unflatten_dict(flat: Dict[str, Any]) -> Dict[str, Any]:
    """{"a.b": 1} -> {"a": {"b": 1}}; nested values are merged."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InfeasibleConfigError(f"config key '{key}' conflicts with a scalar")
        if isinstance(value, dict):
            node.setdefault(parts[-1], {}).update(unflatten_dict(value))
        else:
            node[parts[-1]] = value
    return nested


def parse_value(text: str) -> Any:
    """Parses a CLI value as JSON (numbers, booleans, null), else keeps the string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> Tuple[str, Any]:
    """``protocol.K=10`` -> ("protocol.K", 10)"""
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise InfeasibleConfigError(f"override '{item}' is not of the form key=value")
    return key.strip(), parse_value(value.strip())


def _model_at(path: str):
    """Resolves a dotted path to its field, or raises KeyError."""
    model = RunConfig
    field = None
    for part in path.split("."):
        if model is None or part not in model.__fields__:
            raise KeyError(path)
        field = model.__fields__[part]
        outer = field.outer_type_
        model = outer if isinstance(outer, type) and issubclass(outer, BaseModel) else None
    return field


def field_exists(path: str) -> bool:
    try:
        _model_at(path)
        return True
    except KeyError:
        return False


def validate_run_config(config_dict: Dict[str, Any]) -> RunConfig:
    """
    Validates a nested or dotted-key config dictionary.

    Args:
        config_dict (dict): Nested JSON, flat dotted keys, or a mix.

    Returns:
        RunConfig: The validated config.

    Raises:
        InfeasibleConfigError: On validation errors; carries the pydantic report.
    """
    try:
        return RunConfig.parse_obj(unflatten_dict(config_dict))
    except ValidationError as exc:
        raise InfeasibleConfigError(
            f"Invalid run config: {exc}", report={"errors": exc.errors()}
        ) from exc


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Returns a new config with dotted-key values replaced."""
    flat = flatten_dict(json.loads(config.json()))
    for key in overrides:
        if not field_exists(key):
            raise InfeasibleConfigError(
                f"unknown config key '{key}'", report={"errors": [{"loc": key}]}
            )
    # a replaced section drops its old sub-keys so stale fields do not linger
    for key, value in overrides.items():
        if isinstance(value, dict) or value is None:
            flat = {k: v for k, v in flat.items() if not k.startswith(f"{key}.")}
        flat[key] = value
    return validate_run_config(flat)


def validate_sweep_axes(axes: Iterable[Tuple[str, List[Any]]]) -> None:
    """
    Raises:
        SweepAxisError: An axis names an unknown field or has no values.
    """
    for path, values in axes:
        if not field_exists(path):
            raise SweepAxisError(f"sweep axis '{path}' is not a config field")
        if not values:
            raise SweepAxisError(f"sweep axis '{path}' has no values")


def parse_run_config(text: str) -> RunConfig:
    """Parses the serialized JSON form produced by ``serialize_run_config``."""
    return validate_run_config(json.loads(text))


def serialize_run_config(config: RunConfig) -> str:
    return config.json(indent=4, sort_keys=True)


def load_run_config(
    config_file_path: str, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Reads a JSON config file (nested or dotted keys) and applies overrides."""
    config = validate_run_config(read_json_as_dict(config_file_path))
    return apply_overrides(config, overrides) if overrides else config
