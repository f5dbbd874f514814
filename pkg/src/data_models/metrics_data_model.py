import numpy as np
import pandas as pd
from pydantic import BaseModel, validator

from sim.simulator import METRICS_COLUMNS

COUNTER_COLUMNS = ["uploads", "upload_bytes", "download_bytes", "max_staleness"]


def get_metrics_validator(T: int) -> BaseModel:
    """
    Returns a Pydantic validator class for a metrics frame of a run with T
    server steps.

    The resulting validator checks the following:

    1. That the metrics frame is not empty.
    2. That the columns are exactly the metrics columns, in order.
    3. That no cell is null and every cell is numeric.
    4. That server steps are strictly increasing, within [1, T] and end at T.
    5. That simulated time never decreases.
    6. That the upload, byte and staleness counters never decrease.

    Args:
        T (int): Number of server steps of the run.

    Returns:
        BaseModel: A dynamic Pydantic BaseModel class for metrics validation.
    """

    class MetricsValidator(BaseModel):
        data: pd.DataFrame

        class Config:
            arbitrary_types_allowed = True

        @validator("data", allow_reuse=True)
        def validate_dataframe(cls, data):
            if data.empty:
                raise ValueError("The metrics frame is empty.")

            if list(data.columns) != METRICS_COLUMNS:
                raise ValueError(
                    f"Metrics columns {list(data.columns)} do not match {METRICS_COLUMNS}."
                )

            if data.isna().any().any():
                raise ValueError("Metrics contain null values. Nulls not allowed.")

            if not all(pd.api.types.is_numeric_dtype(data[c]) for c in data.columns):
                raise ValueError("Metrics contain non-numeric data.")

            steps = data["t"].to_numpy()
            if np.any(np.diff(steps) <= 0):
                raise ValueError("Server steps in metrics are not strictly increasing.")
            if steps[0] < 1 or steps[-1] != T:
                raise ValueError(
                    f"Server steps must lie in [1, {T}] and end at {T}. "
                    f"Given {steps[0]}..{steps[-1]}"
                )

            if np.any(np.diff(data["sim_time"].to_numpy()) < 0):
                raise ValueError("Simulated time decreases between metric rows.")

            for column in COUNTER_COLUMNS:
                if np.any(np.diff(data[column].to_numpy()) < 0):
                    raise ValueError(f"Counter '{column}' decreases between metric rows.")
            return data

    return MetricsValidator


def validate_metrics(metrics: pd.DataFrame, T: int) -> pd.DataFrame:
    """
    Validates a metrics frame before it is written.

    Args:
        metrics (pd.DataFrame): Metric rows of one run.
        T (int): Number of server steps of the run.

    Returns:
        pd.DataFrame: The validated data.
    """
    MetricsValidator = get_metrics_validator(T)
    try:
        validated_data = MetricsValidator(data=metrics)
        return validated_data.data
    except ValueError as exc:
        raise ValueError(f"Metrics validation failed: {str(exc)}") from exc
