"""Run summaries: trend statistics of a metrics frame and the convergence-bound
report evaluated at a run's measured constants."""
import json
import math
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from analysis.theorem import TheoremInputs, check_stepsize_conditions, evaluate_bound
from data_models.run_config import RunConfig
from errors import QuantizerError
from logger import get_logger
from objectives.objectives import ObjectiveConstants, estimate_constants
from protocol.protocol import ProtocolMode
from quantizers.contraction import effective_delta
from quantizers.quantizers import QuantizerSpec
from sim.simulator import Problem, SimulationResult
from utils import SeedStreams

logger = get_logger(task_name="analysis")

HALF = 0.5
HUNDREDTH = 1e-2
PLATEAU_FRACTION = 0.1
CONVERGED_RATIO = 1e-2
SUMMARY_PROBES = 3


def steps_to_fraction(frame: pd.DataFrame, initial: float, fraction: float) -> Optional[int]:
    """First server step whose f - f* is at most fraction * initial, or None."""
    hits = frame.loc[frame["f_minus_fstar"] <= fraction * initial, "t"]
    return int(hits.iloc[0]) if len(hits) else None


def plateau_suboptimality(frame: pd.DataFrame, fraction: float = PLATEAU_FRACTION) -> float:
    """Mean f - f* over the last ``fraction`` of the metric rows (at least one row)."""
    n = max(1, int(math.ceil(fraction * len(frame))))
    return float(frame["f_minus_fstar"].iloc[-n:].mean())


def log_suboptimality_slope(frame: pd.DataFrame) -> float:
    """
    Slope of a linear fit of log(f - f*) against t over the second half of
    the rows. Values at or below zero are clipped to the smallest positive
    double. NaN with fewer than two rows.
    """
    tail = frame.iloc[len(frame) // 2 :]
    if len(tail) < 2:
        return math.nan
    gaps = np.maximum(tail["f_minus_fstar"].to_numpy(dtype=np.float64), np.finfo(float).tiny)
    return float(np.polyfit(tail["t"].to_numpy(dtype=np.float64), np.log(gaps), 1)[0])


def _delta_or_none(spec: QuantizerSpec, d: int) -> Optional[float]:
    try:
        return effective_delta(spec, d).delta
    except QuantizerError as exc:
        logger.warning(f"No contraction parameter: {exc}")
        return None


def run_constants(config: RunConfig, problem: Problem) -> ObjectiveConstants:
    """Constants at the run's minibatch size, probed from the run seed's probe stream."""
    batch_size = (
        max(shard.size for shard in problem.shards)
        if config.protocol.full_batch
        else config.protocol.batch_size
    )
    return estimate_constants(
        config.objective,
        problem.dataset,
        problem.shards,
        probes=SUMMARY_PROBES,
        rng=SeedStreams(config.seed).generator("probes"),
        batch_size=batch_size,
        oracle=problem.oracle,
    )


def theorem_report(
    config: RunConfig,
    constants: ObjectiveConstants,
    initial_f_minus_fstar: float,
    tau_max: int,
    delta_c: Optional[float],
    delta_s: Optional[float],
) -> Optional[Dict[str, Any]]:
    """
    Step-size conditions and bound terms for a run. None when either
    contraction parameter is unavailable.
    """
    if delta_c is None or delta_s is None:
        return None
    protocol = config.protocol
    inputs = TheoremInputs(
        L=constants.L,
        sigma_l2=constants.sigma_l2,
        B=constants.B,
        F=max(initial_f_minus_fstar, 0.0),
        T=config.T,
        K=protocol.K,
        P=protocol.P,
        tau_max=tau_max,
        eta_g=protocol.eta_g,
        eta_l=protocol.eta_l,
        delta_c=delta_c,
        delta_s=delta_s,
    )
    return {
        "inputs": inputs.dict(),
        "conditions": check_stepsize_conditions(inputs).dict(),
        "bound": evaluate_bound(inputs).dict(),
        # the bound is stated for hidden-state broadcasts
        "covers_protocol": protocol.mode != ProtocolMode.NAIVE_DIRECT,
    }


def summarize_run(
    config: RunConfig,
    problem: Problem,
    result: SimulationResult,
    constants: Optional[ObjectiveConstants] = None,
) -> Dict[str, Any]:
    """
    Builds the JSON summary of one run.

    Args:
        config (RunConfig): The run's config.
        problem (Problem): Its prepared problem.
        result (SimulationResult): Its output.
        constants (ObjectiveConstants, optional): Precomputed constants; probed
            when omitted.

    Returns:
        dict: Final metrics, divergence and convergence flags, trend
            statistics, totals, effective contraction parameters, constants,
            the bound report, the config echo and the seed.
    """
    frame = result.to_frame()
    final = {column: frame[column].iloc[-1].item() for column in frame.columns}
    initial = result.initial_f_minus_fstar
    d = problem.objective.dimension
    if constants is None:
        constants = run_constants(config, problem)
    delta_c = _delta_or_none(config.protocol.uplink_quantizer, d)
    delta_s = _delta_or_none(config.protocol.downlink_quantizer, d)
    max_staleness = max(result.staleness_trace) if result.staleness_trace else 0

    return {
        "seed": config.seed,
        "config": json.loads(config.json()),
        "dataset": {
            "name": problem.dataset.name,
            "rows": problem.dataset.num_rows,
            "features": problem.dataset.num_features,
            "checksum": problem.dataset.checksum,
            "clients": problem.objective.num_clients,
            "used_synthetic_fallback": problem.used_fallback,
        },
        "f_star": problem.f_star,
        "initial": {
            "f_minus_fstar": initial,
            "grad_norm_sq": result.initial_grad_norm_sq,
        },
        "final": final,
        "diverged": bool(final["f_minus_fstar"] > initial),
        "converged": bool(final["f_minus_fstar"] < initial * CONVERGED_RATIO),
        "steps_to_half": steps_to_fraction(frame, initial, HALF),
        "steps_to_hundredth": steps_to_fraction(frame, initial, HUNDREDTH),
        "plateau_f_minus_fstar": plateau_suboptimality(frame),
        "last_half_log_slope": log_suboptimality_slope(frame),
        "totals": {
            "server_steps": result.server_steps,
            "uploads": int(final["uploads"]),
            "upload_bytes": int(final["upload_bytes"]),
            "download_bytes": int(final["download_bytes"]),
            "download_messages": result.download_messages,
            "broadcasts": result.broadcasts,
            "rejected_arrivals": result.rejected_arrivals,
            "max_staleness": max_staleness,
        },
        "effective_delta": {"client": delta_c, "server": delta_s},
        "constants": constants.dict(),
        "theorem": theorem_report(config, constants, initial, max_staleness, delta_c, delta_s),
    }
