import math
from typing import Sequence

from pydantic import BaseModel

from errors import ProtocolError


class StalenessReport(BaseModel):
    """Max staleness with K=1 and with K=k on matched schedules."""

    K: int
    max_staleness_k1: int
    max_staleness_k: int
    bound: int
    passed: bool


def staleness_trace_check(
    trace_k1: Sequence[int], trace_k: Sequence[int], K: int
) -> StalenessReport:
    """
    Checks max tau under buffer size K against ceil(max tau under K=1 / K).

    Args:
        trace_k1 (Sequence[int]): Staleness of every applied update, K=1 run.
        trace_k (Sequence[int]): Same seed and delays, buffer size K.
        K (int): Buffer size of the second run.

    Returns:
        StalenessReport: Both maxima, the bound and whether it holds.
    """
    if K < 1:
        raise ProtocolError(f"K must be at least 1. Given {K}")
    if not trace_k1 or not trace_k:
        raise ProtocolError("staleness traces must not be empty")
    max_k1 = max(trace_k1)
    max_k = max(trace_k)
    bound = math.ceil(max_k1 / K)
    return StalenessReport(
        K=K,
        max_staleness_k1=max_k1,
        max_staleness_k=max_k,
        bound=bound,
        passed=max_k <= bound,
    )
