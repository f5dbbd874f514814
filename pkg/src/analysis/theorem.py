"""Convergence-bound machinery for buffered quantized asynchronous FL.

The bound on the ergodic squared gradient norm is the sum of four terms:

    descent      = 4 F / (T eta_g P eta_l)
    client_quant = 2 L eta_g eta_l (2 - delta_c) sigma^2 / K
    drift        = 80 L^2 P^2 eta_l^2 (sigma^2 + B)
    server_stale = 8 L^2 eta_g^2 P eta_l^2 (2 - delta_c) (tau^2 + 8 / delta_s^2) sigma^2 / K

where F = f(x^0) - f*. It holds when

    eta_g^2 (tau^2 + 8 / delta_s^2) + (1 + (1 - delta_s) / K) eta_l eta_g L <= 1 / P
    eta_l^2 <= 1 / (80 L^2 P^2 tau)
    eta_l <= 1 / (4 L (P + 1))

With eta_l = c_l / (K sqrt(P) T^(1/3)) and eta_g = c_g K T^(-1/6) the terms
decay as T^(-1/2) (descent + client_quant), T^(-2/3) (drift) and T^(-1)
(server_stale).
"""
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator

from errors import InfeasibleStepsizeError
from logger import get_logger

logger = get_logger(task_name="analysis")

BASE_C_L = 1.0
BASE_C_G = 0.25
MAX_HALVINGS = 60
TERM_NAMES = ("descent", "client_quant", "drift", "server_stale")
TERM_GROUPS = {
    "main_error": ("descent", "client_quant"),
    "heterogeneity": ("drift",),
    "staleness": ("server_stale",),
}
EXPECTED_SLOPES = {"main_error": -0.5, "heterogeneity": -2.0 / 3.0, "staleness": -1.0}


class TheoremInputs(BaseModel):
    """Every constant of the bound. ``F`` is f(x^0) - f*."""

    L: float
    sigma_l2: float = 0.0
    B: float = 0.0
    F: float = 0.0
    T: int
    K: int
    P: int
    tau_max: int = 0
    eta_g: float
    eta_l: float
    delta_c: float = 1.0
    delta_s: float = 1.0

    @validator("L", allow_reuse=True)
    def positive_smoothness(cls, v):
        if not v > 0:
            raise ValueError(f"L must be positive. Given {v}")
        return v

    @validator("sigma_l2", "B", "F", "eta_g", "eta_l", allow_reuse=True)
    def non_negative(cls, v, field):
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"{field.name} must be finite and non-negative. Given {v}")
        return v

    @validator("T", "K", "P", allow_reuse=True)
    def at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1. Given {v}")
        return v

    @validator("tau_max", allow_reuse=True)
    def non_negative_staleness(cls, v):
        if v < 0:
            raise ValueError(f"tau_max must be non-negative. Given {v}")
        return v

    @validator("delta_c", "delta_s", allow_reuse=True)
    def delta_in_range(cls, v, field):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"{field.name} must be in (0, 1]. Given {v}")
        return v


class ConditionResult(BaseModel):
    name: str
    lhs: float
    rhs: float
    slack: float
    passed: bool


class StepsizeReport(BaseModel):
    conditions: List[ConditionResult]
    passed: bool

    def failed(self) -> List[str]:
        return [c.name for c in self.conditions if not c.passed]


class BoundReport(BaseModel):
    total: float
    terms: Dict[str, float]
    groups: Dict[str, float]
    conditions_passed: bool


class StepsizeSuggestion(BaseModel):
    eta_l: float
    eta_g: float
    c_l: float
    c_g: float
    halvings: int
    report: StepsizeReport


def _condition(name: str, lhs: float, rhs: float) -> ConditionResult:
    return ConditionResult(name=name, lhs=lhs, rhs=rhs, slack=rhs - lhs, passed=lhs <= rhs)


def check_stepsize_conditions(inputs: TheoremInputs) -> StepsizeReport:
    """
    Evaluates the three step-size conditions.

    Slack is rhs - lhs; a condition passes when the slack is non-negative.
    The drift condition has an infinite right-hand side when tau_max = 0.
    """
    i = inputs
    server_lhs = i.eta_g ** 2 * (i.tau_max ** 2 + 8.0 / i.delta_s ** 2) + (
        1.0 + (1.0 - i.delta_s) / i.K
    ) * i.eta_l * i.eta_g * i.L
    drift_rhs = (
        math.inf if i.tau_max == 0 else 1.0 / (80.0 * i.L ** 2 * i.P ** 2 * i.tau_max)
    )
    conditions = [
        _condition("server_step", server_lhs, 1.0 / i.P),
        _condition("staleness_drift", i.eta_l ** 2, drift_rhs),
        _condition("local_step", i.eta_l, 1.0 / (4.0 * i.L * (i.P + 1))),
    ]
    return StepsizeReport(conditions=conditions, passed=all(c.passed for c in conditions))


def bound_terms(inputs: TheoremInputs) -> Dict[str, float]:
    i = inputs
    quant_factor = 2.0 - i.delta_c
    stale_factor = i.tau_max ** 2 + 8.0 / i.delta_s ** 2
    if i.F == 0.0:
        descent = 0.0
    elif i.eta_g * i.eta_l == 0.0:
        descent = math.inf
    else:
        descent = 4.0 * i.F / (i.T * i.eta_g * i.P * i.eta_l)
    return {
        "descent": descent,
        "client_quant": 2.0 * i.L * i.eta_g * i.eta_l * quant_factor * i.sigma_l2 / i.K,
        "drift": 80.0 * i.L ** 2 * i.P ** 2 * i.eta_l ** 2 * (i.sigma_l2 + i.B),
        "server_stale": 8.0
        * i.L ** 2
        * i.eta_g ** 2
        * i.P
        * i.eta_l ** 2
        * quant_factor
        * stale_factor
        * i.sigma_l2
        / i.K,
    }


def corollary_groups(terms: Dict[str, float]) -> Dict[str, float]:
    """Sums terms into main error, heterogeneity and staleness groups."""
    return {group: sum(terms[name] for name in names) for group, names in TERM_GROUPS.items()}


def evaluate_bound(inputs: TheoremInputs) -> BoundReport:
    """
    Evaluates the bound on (1/T) sum_t E||grad f(x^t)||^2.

    Args:
        inputs (TheoremInputs): Problem constants and step sizes.

    Returns:
        BoundReport: Total, the four terms, their groups and whether the
            step-size conditions hold. A failed condition only logs a warning;
            the number is then not a guarantee.
    """
    report = check_stepsize_conditions(inputs)
    if not report.passed:
        logger.warning(
            f"Step-size conditions {report.failed()} fail; the bound is not guaranteed"
        )
    terms = bound_terms(inputs)
    return BoundReport(
        total=sum(terms.values()),
        terms=terms,
        groups=corollary_groups(terms),
        conditions_passed=report.passed,
    )


def fedbuff_limit(inputs: TheoremInputs) -> TheoremInputs:
    """The same inputs with lossless quantizers (delta_c = delta_s = 1)."""
    return inputs.copy(update={"delta_c": 1.0, "delta_s": 1.0})


def corollary_stepsizes(
    K: int, P: int, T: int, c_l: float = BASE_C_L, c_g: float = BASE_C_G
) -> Tuple[float, float]:
    """eta_l = c_l / (K sqrt(P) T^(1/3)), eta_g = c_g K T^(-1/6)."""
    eta_l = c_l / (K * math.sqrt(P) * T ** (1.0 / 3.0))
    eta_g = c_g * K * T ** (-1.0 / 6.0)
    return eta_l, eta_g


def suggest_stepsizes(
    K: int,
    P: int,
    T: int,
    L: float,
    tau_max: int,
    delta_s: float,
    delta_c: float = 1.0,
    c_l: float = BASE_C_L,
    c_g: float = BASE_C_G,
    max_halvings: int = MAX_HALVINGS,
) -> StepsizeSuggestion:
    """
    Corollary step sizes with c_l and c_g halved until every condition holds.

    A failing local or drift condition halves c_l; a failing server condition
    halves c_g.

    Args:
        K, P, T (int): Buffer size, local steps and horizon.
        L (float): Smoothness.
        tau_max (int): Maximum staleness.
        delta_s (float): Server quantizer contraction.
        delta_c (float): Client quantizer contraction (not used by the conditions).
        c_l, c_g (float): Starting constants.
        max_halvings (int): Halving budget.

    Returns:
        StepsizeSuggestion: Step sizes, final constants and the condition report.

    Raises:
        InfeasibleStepsizeError: Conditions still fail after max_halvings halvings.
    """
    halvings = 0
    while True:
        eta_l, eta_g = corollary_stepsizes(K, P, T, c_l, c_g)
        inputs = TheoremInputs(
            L=L, T=T, K=K, P=P, tau_max=tau_max, eta_g=eta_g, eta_l=eta_l,
            delta_c=delta_c, delta_s=delta_s,
        )
        report = check_stepsize_conditions(inputs)
        if report.passed:
            return StepsizeSuggestion(
                eta_l=eta_l, eta_g=eta_g, c_l=c_l, c_g=c_g, halvings=halvings, report=report
            )
        failed = set(report.failed())
        if halvings >= max_halvings:
            raise InfeasibleStepsizeError(
                f"no feasible step sizes after {halvings} halvings; failing: {sorted(failed)}"
            )
        if failed & {"local_step", "staleness_drift"}:
            c_l /= 2.0
            halvings += 1
        if "server_step" in failed and halvings < max_halvings:
            c_g /= 2.0
            halvings += 1


def term_slopes(
    inputs: TheoremInputs,
    T_values: Sequence[int],
    c_l: float = BASE_C_L,
    c_g: float = BASE_C_G,
) -> Dict[str, float]:
    """
    Log-log slope of each term group against T at corollary step sizes with
    fixed constants (every other input taken from ``inputs``).
    """
    log_t = np.log(np.asarray(T_values, dtype=np.float64))
    series: Dict[str, List[float]] = {group: [] for group in TERM_GROUPS}
    for T in T_values:
        eta_l, eta_g = corollary_stepsizes(inputs.K, inputs.P, int(T), c_l, c_g)
        groups = corollary_groups(
            bound_terms(inputs.copy(update={"T": int(T), "eta_l": eta_l, "eta_g": eta_g}))
        )
        for group, value in groups.items():
            series[group].append(value)
    slopes = {}
    for group, values in series.items():
        values = np.asarray(values)
        if np.all(values > 0):
            slopes[group] = float(np.polyfit(log_t, np.log(values), 1)[0])
        else:
            slopes[group] = math.nan
    return slopes
