import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, root_validator, validator


class EventKind(str, Enum):
    """Enum for scheduler events"""

    CLIENT_DONE = "client_done"
    CLIENT_ARRIVAL = "client_arrival"


@dataclass(frozen=True, order=True)
class SimEvent:
    """A scheduled event. Ordered by (time, tiebreak_seq) only."""

    time: float
    tiebreak_seq: int
    kind: EventKind = field(compare=False)
    client_id: int = field(compare=False, default=-1)


class DelayKind(str, Enum):
    """Enum for the training-duration distribution"""

    HALF_NORMAL = "half_normal"
    CONSTANT = "constant"


class DelayModel(BaseModel):
    """Training durations: scale * |z| with z ~ N(0, 1), or the constant scale."""

    kind: DelayKind = DelayKind.HALF_NORMAL
    scale: float = 1.0

    class Config:
        extra = "forbid"

    @validator("scale", allow_reuse=True)
    def positive_scale(cls, v):
        if not (v > 0.0 and math.isfinite(v)):
            raise ValueError(f"delay scale must be positive and finite. Given {v}")
        return v

    @property
    def mean(self) -> float:
        if self.kind == DelayKind.CONSTANT:
            return self.scale
        return self.scale * math.sqrt(2.0 / math.pi)


class ArrivalKind(str, Enum):
    """Enum for how clients enter training"""

    FIXED_POOL = "fixed_pool"
    OPEN_ARRIVAL = "open_arrival"


class ArrivalModel(BaseModel):
    """
    ``fixed_pool``: pool_size clients cycle train, send, train.
    ``open_arrival``: one arrival every 1/arrival_rate time units, at most
    concurrency_cap clients training at once (unbounded when None).
    """

    kind: ArrivalKind = ArrivalKind.FIXED_POOL
    pool_size: Optional[int] = 100
    arrival_rate: Optional[float] = None
    concurrency_cap: Optional[int] = None

    class Config:
        extra = "forbid"

    @validator("pool_size", "concurrency_cap", allow_reuse=True)
    def positive_count(cls, v, field):
        if v is not None and v < 1:
            raise ValueError(f"{field.name} must be at least 1. Given {v}")
        return v

    @validator("arrival_rate", allow_reuse=True)
    def positive_rate(cls, v):
        if v is not None and not (v > 0.0 and math.isfinite(v)):
            raise ValueError(f"arrival_rate must be positive and finite. Given {v}")
        return v

    @root_validator(skip_on_failure=True, allow_reuse=True)
    def fields_match_kind(cls, values):
        if values["kind"] == ArrivalKind.FIXED_POOL and values.get("pool_size") is None:
            raise ValueError("fixed_pool arrival model requires pool_size")
        if values["kind"] == ArrivalKind.OPEN_ARRIVAL and values.get("arrival_rate") is None:
            raise ValueError("open_arrival arrival model requires arrival_rate")
        return values


def sample_duration(model: DelayModel, rng: np.random.Generator) -> float:
    """One training duration. Constant delays draw nothing from rng."""
    if model.kind == DelayKind.CONSTANT:
        return float(model.scale)
    return float(model.scale * abs(rng.standard_normal()))


def next_arrival(model: ArrivalModel, now: float) -> float:
    """
    The arrival after ``now`` on the grid k / arrival_rate. Snapping to the
    grid keeps arrival times exact instead of accumulating 1/rate.
    """
    if model.kind != ArrivalKind.OPEN_ARRIVAL:
        raise ValueError("next_arrival requires an open_arrival model")
    index = math.floor(now * model.arrival_rate + 1e-9)
    return (index + 1) / model.arrival_rate
