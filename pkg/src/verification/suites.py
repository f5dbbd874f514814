"""Acceptance suites behind ``verify.py``.

Each suite returns a ``SuiteReport`` listing every criterion with its measured
value, the requirement and a pass flag. Sizes come from
``config/verify_config.json``.
"""
import math
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel

from analysis.reports import (
    HALF,
    HUNDREDTH,
    log_suboptimality_slope,
    plateau_suboptimality,
    steps_to_fraction,
)
from analysis.theorem import (
    EXPECTED_SLOPES,
    TheoremInputs,
    check_stepsize_conditions,
    corollary_stepsizes,
    evaluate_bound,
    suggest_stepsizes,
    term_slopes,
)
from config import paths
from data_models.run_config import RunConfig, apply_overrides, load_run_config
from errors import InfeasibleStepsizeError, ProtocolError
from logger import get_logger
from objectives.objectives import quadratic_constants
from quantizers.contraction import ContractionReport, verify_contraction
from quantizers.quantizers import IDENTITY, QuantizerSpec, quantize
from sim.events import ArrivalKind, ArrivalModel, next_arrival
from sim.simulator import Problem, Simulation, SimulationResult, prepare_problem, run_simulation
from sim.staleness import staleness_trace_check
from utils import SeedStreams, dataframe_to_csv_text

logger = get_logger(task_name="verify")

SUITES = ("quantizers", "protocol", "theorem", "figures")


class Criterion(BaseModel):
    name: str
    measured: Any
    required: str
    passed: bool


class SuiteReport(BaseModel):
    """Every criterion of one suite; the suite passes when all of them do."""

    suite: str
    criteria: List[Criterion]
    notes: List[str] = []
    passed: bool

    def failed(self) -> List[str]:
        return [c.name for c in self.criteria if not c.passed]


def _report(suite: str, criteria: List[Criterion], notes: Optional[List[str]] = None):
    return SuiteReport(
        suite=suite,
        criteria=criteria,
        notes=notes or [],
        passed=all(c.passed for c in criteria),
    )


def log_criteria(report: SuiteReport) -> None:
    for c in report.criteria:
        status = "PASS" if c.passed else "FAIL"
        logger.info(f"[{status}] {c.name}: measured {c.measured}; required {c.required}")
    for note in report.notes:
        logger.info(f"Note: {note}")


# ----------------------------------------------------------------------------
# quantizers


def quantizer_grid(section: Dict[str, Any]) -> List[QuantizerSpec]:
    specs = [IDENTITY]
    specs += [QuantizerSpec(kind="qsgd", bits_per_coord=b) for b in section["qsgd_bits"]]
    specs += [QuantizerSpec(kind="topk", keep_fraction=k) for k in section["topk_keep_fractions"]]
    return specs


def _contraction_criteria(report: ContractionReport) -> List[Criterion]:
    label = f"{report.quantizer} d={report.d}"
    if report.required_max_ratio is None:
        required = "a certified contraction parameter delta > 0"
    elif report.quantizer.startswith("qsgd"):
        required = f"<= {report.required_max_ratio:.6g} within 4 standard errors"
    else:
        required = f"<= {report.required_max_ratio:.6g}"
    criteria = [
        Criterion(
            name=f"{label} contraction",
            measured=report.max_ratio,
            required=required,
            passed=report.contraction_passed,
        )
    ]
    if report.unbiased_passed is not None:
        criteria.append(
            Criterion(
                name=f"{label} unbiasedness",
                measured=report.max_unbiased_z,
                required=f"max |z| <= {report.unbiased_z_threshold:.4g}",
                passed=report.unbiased_passed,
            )
        )
    if report.remark_passed is not None:
        se = report.remark_standard_error
        criteria.append(
            Criterion(
                name=f"{label} sum bound",
                measured=report.remark_mean_slack,
                required="mean slack >= -4 standard errors"
                + ("" if se is None else f" ({-4.0 * se:.4g})"),
                passed=report.remark_passed,
            )
        )
    criteria.append(
        Criterion(
            name=f"{label} round trip",
            measured=report.roundtrip_passed,
            required="bit-exact decode of the serialized message",
            passed=report.roundtrip_passed,
        )
    )
    criteria.append(
        Criterion(
            name=f"{label} encoded size",
            measured=report.encoded_size_bits,
            required=f"== {report.expected_size_bits} bits",
            passed=report.size_passed,
        )
    )
    return criteria


def byte_accounting_criteria(section: Dict[str, Any], rng: np.random.Generator) -> List[Criterion]:
    """qsgd upload size against the float32 identity message at a large d."""
    d = section["byte_accounting_dimension"]
    tolerance = section["byte_accounting_tolerance"]
    x = rng.standard_normal(d)
    identity_bits = quantize(IDENTITY, x)[0].encoded_size_bits
    criteria = []
    for bits in section["byte_accounting_bits"]:
        message, _ = quantize(QuantizerSpec(kind="qsgd", bits_per_coord=bits), x, rng)
        ratio = identity_bits / message.encoded_size_bits
        target = 32.0 / bits
        criteria.append(
            Criterion(
                name=f"qsgd b={bits} d={d} size ratio",
                measured=ratio,
                required=f"within {tolerance:.0%} of {target:.4g}",
                passed=abs(ratio - target) <= tolerance * target,
            )
        )
    return criteria


def run_quantizer_suite(section: Dict[str, Any], jobs: int = 1) -> SuiteReport:
    """Contraction, unbiasedness, sum bound, round trip and sizes on the quantizer grid."""
    cases = [(spec, d) for spec in quantizer_grid(section) for d in section["dimensions"]]
    seeds = SeedStreams(section["seed"]).seed_sequence("client_quantizer").spawn(len(cases) + 1)
    reports = Parallel(n_jobs=jobs)(
        delayed(verify_contraction)(
            spec,
            section["trials"],
            d,
            np.random.default_rng(seed),
            unbiased_draws=section["unbiased_draws"],
            tuples=section["sum_bound_tuples"],
            tuple_size=section["sum_bound_tuple_size"],
        )
        for (spec, d), seed in zip(cases, seeds)
    )
    criteria = [c for report in reports for c in _contraction_criteria(report)]
    criteria += byte_accounting_criteria(section, np.random.default_rng(seeds[-1]))
    notes = [
        f"{r.quantizer} d={r.d}: no certified delta, the scheme does not contract here"
        for r in reports
        if r.delta is None
    ]
    return _report("quantizers", criteria, notes)


# ----------------------------------------------------------------------------
# protocol


def synthetic_config(section: Dict[str, Any], overrides: Dict[str, Any]) -> RunConfig:
    """Small synthetic logistic problem with a full client pool; overrides win."""
    base = {
        "data.source": "synthetic",
        "data.synthetic_rows": section["synthetic_rows"],
        "data.synthetic_features": section["synthetic_features"],
        "data.n_clients": section["n_clients"],
        "arrival.pool_size": section["n_clients"],
        "metrics.every": 1,
    }
    return apply_overrides(RunConfig(), {**base, **overrides})


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


def fedbuff_reduction_criterion(section, problem: Problem) -> Criterion:
    T = section["fedbuff_steps"]
    common = {"T": T, "protocol.server_quantizer": {"kind": "identity"}}
    qafel = run_simulation(
        synthetic_config(section, {**common, "protocol.mode": "qafel"}), problem, True
    )
    plain = run_simulation(
        synthetic_config(section, {**common, "protocol.mode": "unquantized"}), problem, True
    )
    equal = len(qafel.iterates) == len(plain.iterates) == T and all(
        _same_bits(a, b) for a, b in zip(qafel.iterates, plain.iterates)
    )
    return Criterion(
        name="identity-quantizer qafel equals unquantized",
        measured=f"{sum(_same_bits(a, b) for a, b in zip(qafel.iterates, plain.iterates))}"
        f" of {T} iterates bit-identical",
        required=f"all {T} iterates bit-identical",
        passed=equal,
    )


def hidden_state_criterion(section, problem: Problem) -> Criterion:
    config = synthetic_config(
        section,
        {
            "T": section["hidden_state_steps"],
            "protocol.server_quantizer": {"kind": "topk", "keep_fraction": 0.01},
        },
    )
    simulation = Simulation(config, problem)
    try:
        result = simulation.run()
    except ProtocolError as exc:
        return Criterion(
            name="hidden-state copies identical",
            measured=str(exc),
            required="no divergence",
            passed=False,
        )
    copies = [simulation.log.catch_up(c).local_hat for c in simulation.clients.values()]
    identical = sum(_same_bits(c, simulation.server.x_hat) for c in copies)
    return Criterion(
        name="hidden-state copies identical",
        measured=f"{identical + 1} of {len(copies) + 1} copies after {result.broadcasts} "
        f"broadcasts ({result.hidden_state_checks} checks during the run)",
        required="every client copy equals the server hidden state",
        passed=identical == len(copies),
    )


def determinism_criteria(section, problem: Problem) -> List[Criterion]:
    overrides = {
        "T": section["hidden_state_steps"],
        "protocol.server_quantizer": {"kind": "topk", "keep_fraction": 0.5},
        "protocol.client_quantizer": {"kind": "qsgd", "bits_per_coord": 4},
    }
    config = synthetic_config(section, overrides)
    first = run_simulation(config, problem)
    second = run_simulation(config, problem)
    same_csv = dataframe_to_csv_text(first.to_frame()) == dataframe_to_csv_text(
        second.to_frame()
    )
    toggled = run_simulation(
        synthetic_config(
            section,
            {
                **overrides,
                "protocol.server_quantizer": {"kind": "identity"},
                "protocol.client_quantizer": {"kind": "identity"},
            },
        ),
        problem,
    )
    same_events = first.event_trace == toggled.event_trace
    uploads = int(first.to_frame()["uploads"].iloc[-1])
    K, T = config.protocol.K, config.T
    return [
        Criterion(
            name="repeated run reproduces the CSV",
            measured=same_csv,
            required="byte-identical metrics CSV",
            passed=same_csv,
        ),
        Criterion(
            name="quantizer toggle keeps the event sequence",
            measured=f"{len(first.event_trace)} vs {len(toggled.event_trace)} events, "
            f"identical={same_events}",
            required="identical (time, kind, client) sequence",
            passed=same_events,
        ),
        Criterion(
            name="message conservation",
            measured=f"uploads={uploads}, downloads={first.download_messages}",
            required=f"uploads == K*T == {K * T}, downloads == broadcasts*clients == "
            f"{first.broadcasts * problem.objective.num_clients}",
            passed=uploads == K * T
            and first.download_messages == first.broadcasts * problem.objective.num_clients,
        ),
    ]


def staleness_criteria(section, problem: Problem) -> List[Criterion]:
    K = section["staleness_K"]
    steps = section["staleness_steps"]
    outcomes = []
    for seed in range(section["staleness_seeds"]):
        common = {
            "seed": seed,
            "arrival.pool_size": section["staleness_pool"],
            "delay.kind": "half_normal",
        }
        k1 = run_simulation(
            synthetic_config(
                section, {**common, "protocol.K": 1, "T": K * steps, "metrics.every": K * steps}
            ),
            problem,
        )
        kk = run_simulation(
            synthetic_config(section, {**common, "protocol.K": K, "T": steps, "metrics.every": steps}),
            problem,
        )
        outcomes.append(staleness_trace_check(k1.staleness_trace, kk.staleness_trace, K))

    pool = 10
    constant = {"delay.kind": "constant", "delay.scale": 1.0, "data.n_clients": pool,
                "arrival.pool_size": pool}
    small_problem = prepare_problem(synthetic_config(section, constant))
    c1 = run_simulation(
        synthetic_config(section, {**constant, "protocol.K": 1, "T": 20 * pool, "metrics.every": 20 * pool}),
        small_problem,
    )
    c10 = run_simulation(
        synthetic_config(section, {**constant, "protocol.K": pool, "T": 20, "metrics.every": 20}),
        small_problem,
    )
    round_robin = staleness_trace_check(c1.staleness_trace, c10.staleness_trace, pool)
    return [
        Criterion(
            name=f"staleness bound, half-normal, pool {section['staleness_pool']}, K={K}",
            measured=[(o.max_staleness_k1, o.max_staleness_k) for o in outcomes],
            required=f"max tau at K={K} <= ceil(max tau at K=1 / {K}) on every seed",
            passed=all(o.passed for o in outcomes),
        ),
        Criterion(
            name=f"staleness bound, constant delays, pool {pool}, K={pool}",
            measured=(round_robin.max_staleness_k1, round_robin.max_staleness_k),
            required=f"max tau at K={pool} <= ceil(max tau at K=1 / {pool})",
            passed=round_robin.passed,
        ),
    ]


def scheduling_criteria(section, problem: Problem) -> List[Criterion]:
    cadence = run_simulation(
        synthetic_config(
            section,
            {
                "arrival.pool_size": 1,
                "protocol.K": 1,
                "delay.kind": "constant",
                "delay.scale": 2.0,
                "T": 10,
            },
        ),
        problem,
    ).to_frame()
    expected = (2.0 * cadence["t"]).tolist()
    arrivals, now = 1, 0.0
    grid = ArrivalModel(kind=ArrivalKind.OPEN_ARRIVAL, arrival_rate=125.0, pool_size=None)
    while True:
        now = next_arrival(grid, now)
        if now >= 1.0:
            break
        arrivals += 1
    open_config = synthetic_config(
        section,
        {
            "arrival": {"kind": "open_arrival", "arrival_rate": 10.0, "concurrency_cap": 5},
            "T": 20,
        },
    )
    open_run = run_simulation(open_config, problem)
    open_uploads = int(open_run.to_frame()["uploads"].iloc[-1])
    expected_uploads = open_config.protocol.K * open_config.T
    return [
        Criterion(
            name="single-client cadence",
            measured=cadence["sim_time"].tolist(),
            required=f"server steps at {expected}",
            passed=cadence["sim_time"].tolist() == expected,
        ),
        Criterion(
            name="constant arrival rate 125",
            measured=arrivals,
            required="125 arrivals in [0, 1)",
            passed=arrivals == 125,
        ),
        Criterion(
            name="open arrival with concurrency cap",
            measured=f"uploads={open_uploads}, rejected={open_run.rejected_arrivals}",
            required=f"uploads == K*T == {expected_uploads}",
            passed=open_uploads == expected_uploads,
        ),
    ]


def run_protocol_suite(section: Dict[str, Any]) -> SuiteReport:
    """Protocol and scheduler properties on a small synthetic logistic problem."""
    problem = prepare_problem(synthetic_config(section, {}))
    criteria = [
        fedbuff_reduction_criterion(section, problem),
        hidden_state_criterion(section, problem),
    ]
    criteria += determinism_criteria(section, problem)
    criteria += staleness_criteria(section, problem)
    criteria += scheduling_criteria(section, problem)
    return _report("protocol", criteria)


# ----------------------------------------------------------------------------
# theorem

SLOPE_INPUTS = TheoremInputs(
    L=2.0, sigma_l2=1.0, B=0.5, F=1.0, T=1000, K=10, P=4, tau_max=10,
    eta_g=0.1, eta_l=0.01, delta_c=0.5, delta_s=0.5,
)


def slack_criteria(section: Dict[str, Any]) -> List[Criterion]:
    tolerance = section["slack_tolerance"]
    criteria = []
    for index, case in enumerate(section["stepsize_cases"]):
        report = check_stepsize_conditions(TheoremInputs(**case["inputs"]))
        for condition in report.conditions:
            expected = case["slack"][condition.name]
            expected = math.inf if expected is None else expected
            if math.isinf(expected):
                ok = math.isinf(condition.slack) and condition.passed
            else:
                ok = abs(condition.slack - expected) <= tolerance * max(1.0, abs(expected)) and (
                    condition.passed == (expected >= 0)
                )
            criteria.append(
                Criterion(
                    name=f"case {index + 1} {condition.name} slack",
                    measured=condition.slack,
                    required=f"== {expected} (hand-computed)",
                    passed=ok,
                )
            )
    return criteria


def slope_criteria(section: Dict[str, Any]) -> List[Criterion]:
    tolerance = section["slope_tolerance"]
    slopes = term_slopes(SLOPE_INPUTS, section["slope_T_values"])
    return [
        Criterion(
            name=f"{group} slope against T",
            measured=slopes[group],
            required=f"within {tolerance} of {EXPECTED_SLOPES[group]:.4f}",
            passed=abs(slopes[group] - EXPECTED_SLOPES[group]) <= tolerance,
        )
        for group in EXPECTED_SLOPES
    ]


def monotonicity_criteria() -> List[Criterion]:
    base = evaluate_bound(SLOPE_INPUTS).total
    increasing = {"sigma_l2": 2.0, "B": 1.0, "L": 3.0, "tau_max": 20}
    decreasing = {"delta_c": 1.0, "delta_s": 1.0}
    rising = {k: evaluate_bound(SLOPE_INPUTS.copy(update={k: v})).total for k, v in increasing.items()}
    falling = {k: evaluate_bound(SLOPE_INPUTS.copy(update={k: v})).total for k, v in decreasing.items()}
    e_l, e_g = corollary_stepsizes(SLOPE_INPUTS.K, SLOPE_INPUTS.P, SLOPE_INPUTS.T)
    at_t = evaluate_bound(SLOPE_INPUTS.copy(update={"eta_l": e_l, "eta_g": e_g})).total
    e_l2, e_g2 = corollary_stepsizes(SLOPE_INPUTS.K, SLOPE_INPUTS.P, 2 * SLOPE_INPUTS.T)
    at_2t = evaluate_bound(
        SLOPE_INPUTS.copy(update={"T": 2 * SLOPE_INPUTS.T, "eta_l": e_l2, "eta_g": e_g2})
    ).total
    return [
        Criterion(
            name="bound grows with sigma^2, B, L and tau",
            measured={k: v - base for k, v in rising.items()},
            required="every increase >= 0",
            passed=all(v >= base for v in rising.values()),
        ),
        Criterion(
            name="bound shrinks with delta_c and delta_s",
            measured={k: v - base for k, v in falling.items()},
            required="every change <= 0",
            passed=all(v <= base for v in falling.values()),
        ),
        Criterion(
            name="doubling T at corollary step sizes",
            measured=(at_t, at_2t),
            required="bound at 2T < bound at T",
            passed=at_2t < at_t,
        ),
    ]


def _testbed_config(testbed: Dict[str, Any], seed: int, eta_l: float, eta_g: float) -> RunConfig:
    return apply_overrides(
        RunConfig(),
        {
            "objective.kind": "quadratic",
            "data.source": "synthetic",
            "data.synthetic_rows": testbed["synthetic_rows"],
            "data.synthetic_features": testbed["synthetic_features"],
            "data.n_clients": testbed["n_clients"],
            "arrival.pool_size": testbed["n_clients"],
            "protocol.K": testbed["K"],
            "protocol.P": testbed["P"],
            "protocol.batch_size": testbed["batch_size"],
            "protocol.eta_l": eta_l,
            "protocol.eta_g": eta_g,
            "T": testbed["T"],
            "metrics.every": 1,
            "seed": seed,
        },
    )


def _testbed_run(config: RunConfig, problem: Problem) -> Dict[str, Any]:
    result = run_simulation(config, problem)
    frame = result.to_frame()
    return {
        "ergodic": float(frame["ergodic_grad_norm_sq"].iloc[-1]),
        "max_staleness": max(result.staleness_trace),
        "initial": result.initial_f_minus_fstar,
    }


def soundness_criterion(section: Dict[str, Any], jobs: int = 1) -> Criterion:
    """
    Seed-averaged ergodic squared gradient norm on the quadratic testbed
    against the bound at its exact constants. The delay schedule does not
    depend on step sizes, so a pilot pass fixes tau_max before the step sizes
    are chosen.
    """
    testbed = section["testbed"]
    seeds = list(range(testbed["seeds"]))
    K, P, T = testbed["K"], testbed["P"], testbed["T"]
    pilot_eta_l, pilot_eta_g = corollary_stepsizes(K, P, T)
    problem = prepare_problem(_testbed_config(testbed, 0, pilot_eta_l, pilot_eta_g))
    constants = quadratic_constants(
        problem.objective.spec, problem.dataset, problem.shards, testbed["batch_size"]
    )
    pilot = Parallel(n_jobs=jobs)(
        delayed(_testbed_run)(_testbed_config(testbed, s, pilot_eta_l, pilot_eta_g), problem)
        for s in seeds
    )
    tau_max = max(run["max_staleness"] for run in pilot)
    try:
        suggestion = suggest_stepsizes(K=K, P=P, T=T, L=constants.L, tau_max=tau_max, delta_s=1.0)
    except InfeasibleStepsizeError as exc:
        return Criterion(
            name="quadratic testbed ergodic norm under the bound",
            measured=str(exc),
            required="feasible step sizes",
            passed=False,
        )
    runs = Parallel(n_jobs=jobs)(
        delayed(_testbed_run)(
            _testbed_config(testbed, s, suggestion.eta_l, suggestion.eta_g), problem
        )
        for s in seeds
    )
    measured = float(np.mean([run["ergodic"] for run in runs]))
    bound = evaluate_bound(
        TheoremInputs(
            L=constants.L,
            sigma_l2=constants.sigma_l2,
            B=constants.B,
            F=runs[0]["initial"],
            T=T,
            K=K,
            P=P,
            tau_max=max(run["max_staleness"] for run in runs),
            eta_g=suggestion.eta_g,
            eta_l=suggestion.eta_l,
        )
    )
    headroom = testbed["headroom"]
    return Criterion(
        name=f"quadratic testbed ergodic norm under the bound ({len(seeds)} seeds)",
        measured=measured,
        required=f"<= {headroom} x {bound.total:.6g} (tau_max={tau_max}, "
        f"eta_l={suggestion.eta_l:.4g}, eta_g={suggestion.eta_g:.4g})",
        passed=bound.conditions_passed and measured <= headroom * bound.total,
    )


def schedule_criterion(L: float) -> Criterion:
    try:
        suggestion = suggest_stepsizes(K=10, P=4, T=10**6, L=L, tau_max=10, delta_s=1.0)
        measured = f"eta_l={suggestion.eta_l:.4g}, eta_g={suggestion.eta_g:.4g}, " \
                   f"{suggestion.halvings} halvings"
        passed = suggestion.report.passed
    except InfeasibleStepsizeError as exc:
        measured, passed = str(exc), False
    return Criterion(
        name=f"corollary schedule K=10 P=4 T=1e6 at L={L:.4g}",
        measured=measured,
        required="a feasible step-size pair",
        passed=passed,
    )


def run_theorem_suite(section: Dict[str, Any], L: float, jobs: int = 1) -> SuiteReport:
    """Hand-computed slacks, term slopes, monotonicity and the quadratic testbed."""
    criteria = slack_criteria(section)
    criteria += slope_criteria(section)
    criteria += monotonicity_criteria()
    criteria.append(schedule_criterion(L))
    criteria.append(soundness_criterion(section, jobs))
    return _report("theorem", criteria)


# ----------------------------------------------------------------------------
# figures

FIGURE_VARIANTS: Dict[str, Callable[[Dict[str, Any]], Dict[str, Any]]] = {
    "unquantized": lambda s: {"protocol.mode": "unquantized"},
    "naive_topk": lambda s: {
        "protocol.mode": "naive_direct",
        "protocol.server_quantizer": {
            "kind": "topk", "keep_fraction": s["divergence_keep_fraction"]
        },
    },
    "qafel_topk": lambda s: {
        "protocol.mode": "qafel",
        "protocol.server_quantizer": {
            "kind": "topk", "keep_fraction": s["aggressive_keep_fraction"]
        },
    },
    "qafel_qsgd": lambda s: {
        "protocol.mode": "qafel",
        "protocol.server_quantizer": {"kind": "qsgd", "bits_per_coord": s["qsgd_bits"]},
    },
}


def figure_base_config(section: Dict[str, Any], dataset_dir: Optional[str]) -> RunConfig:
    overrides = {
        "data.fallback_to_synthetic": True,
        "T": section["T"],
        "metrics.every": 1,
    }
    if dataset_dir is not None:
        overrides["output.dataset_dir"] = dataset_dir
    return load_run_config(paths.DEFAULT_RUN_CONFIG_FILE_PATH, overrides)


def _figure_run(config: RunConfig, problem: Problem) -> Dict[str, Any]:
    result: SimulationResult = run_simulation(config, problem)
    frame = result.to_frame()
    initial = result.initial_f_minus_fstar
    return {
        "initial": initial,
        "final": float(frame["f_minus_fstar"].iloc[-1]),
        "steps_to_half": steps_to_fraction(frame, initial, HALF),
        "steps_to_hundredth": steps_to_fraction(frame, initial, HUNDREDTH),
        "plateau": plateau_suboptimality(frame),
        "slope": log_suboptimality_slope(frame),
    }


def _strictly(values: Sequence[Optional[float]], decreasing: bool) -> bool:
    if any(v is None for v in values):
        return False
    pairs = zip(values, values[1:])
    return all(b < a for a, b in pairs) if decreasing else all(b > a for a, b in pairs)


def figure_criteria(section: Dict[str, Any], runs: Dict[tuple, Dict[str, Any]]) -> List[Criterion]:
    seeds = section["seeds"]
    local_steps = section["local_steps"]
    unq = [runs[("unquantized", 1, s)] for s in seeds]
    naive = [runs[("naive_topk", 1, s)] for s in seeds]
    aggressive = [runs[("qafel_topk", 1, s)] for s in seeds]
    qsgd = [runs[("qafel_qsgd", 1, s)] for s in seeds]
    target = section["unquantized_target_ratio"]
    gap = section["aggressive_gap_factor"]
    speed = section["qsgd_speed_factor"]

    naive_ratio = float(np.median([r["final"] / r["initial"] for r in naive]))
    unq_ratios = [r["final"] / r["initial"] for r in unq]
    criteria = [
        Criterion(
            name="naive top-k broadcast diverges",
            measured=naive_ratio,
            required="median final/initial suboptimality > 1",
            passed=naive_ratio > 1.0,
        ),
        Criterion(
            name="unquantized run converges on the same traces",
            measured=unq_ratios,
            required=f"final/initial < {target} on every seed",
            passed=all(r < target for r in unq_ratios),
        ),
        Criterion(
            name="qafel with aggressive top-k stays near unquantized",
            measured=[a["final"] / u["final"] if u["final"] > 0 else math.inf
                      for a, u in zip(aggressive, unq)],
            required=f"final suboptimality within {gap}x of unquantized on every seed",
            passed=all(a["final"] <= gap * u["final"] for a, u in zip(aggressive, unq)),
        ),
        Criterion(
            name="qafel with aggressive top-k keeps decreasing",
            measured=[a["slope"] for a in aggressive],
            required="log-suboptimality slope over the last half < 0 on every seed",
            passed=all(a["slope"] < 0 for a in aggressive),
        ),
        Criterion(
            name=f"qafel with {section['qsgd_bits']}-bit qsgd matches unquantized speed",
            measured=[(q["steps_to_hundredth"], u["steps_to_hundredth"]) for q, u in zip(qsgd, unq)],
            required=f"steps to {HUNDREDTH} of initial within {speed}x of unquantized",
            passed=all(
                q["steps_to_hundredth"] is not None
                and u["steps_to_hundredth"] is not None
                and q["steps_to_hundredth"] <= speed * u["steps_to_hundredth"]
                for q, u in zip(qsgd, unq)
            ),
        ),
    ]
    speeds = {s: [runs[("unquantized", p, s)]["steps_to_half"] for p in local_steps] for s in seeds}
    plateaus = {s: [runs[("unquantized", p, s)]["plateau"] for p in local_steps] for s in seeds}
    criteria += [
        Criterion(
            name=f"more local steps converge faster (P={local_steps})",
            measured=speeds,
            required="steps to half suboptimality strictly decreasing in P on every seed",
            passed=all(_strictly(v, decreasing=True) for v in speeds.values()),
        ),
        Criterion(
            name=f"more local steps plateau higher (P={local_steps})",
            measured=plateaus,
            required="plateau suboptimality strictly increasing in P on every seed",
            passed=all(_strictly(v, decreasing=False) for v in plateaus.values()),
        ),
    ]
    return criteria


def run_figures_suite(
    section: Dict[str, Any],
    dataset_dir: Optional[str] = None,
    cache_dir: Optional[str] = None,
    jobs: int = 1,
) -> SuiteReport:
    """The logistic-regression convergence and divergence experiments."""
    base = figure_base_config(section, dataset_dir)
    problem = prepare_problem(base, cache_dir=cache_dir)
    notes = []
    if problem.used_fallback:
        notes.append(
            f"mushrooms not found under {base.output.dataset_dir or paths.DATASETS_DIR}; "
            f"ran on synthetic logistic data {problem.dataset.name}"
        )
    keys = [(variant, 1, seed) for variant in FIGURE_VARIANTS for seed in section["seeds"]]
    keys += [
        ("unquantized", p, seed)
        for p in section["local_steps"]
        if p != 1
        for seed in section["seeds"]
    ]

    def config_for(variant: str, P: int, seed: int) -> RunConfig:
        return apply_overrides(
            base, {**FIGURE_VARIANTS[variant](section), "protocol.P": P, "seed": seed}
        )

    results = Parallel(n_jobs=jobs)(
        delayed(_figure_run)(config_for(*key), problem) for key in keys
    )
    runs = dict(zip(keys, results))
    return _report("figures", figure_criteria(section, runs), notes)


def run_suite(
    suite: str,
    verify_config: Dict[str, Any],
    dataset_dir: Optional[str] = None,
    cache_dir: Optional[str] = None,
    jobs: int = 1,
) -> SuiteReport:
    """Dispatches to the named suite."""
    if suite == "quantizers":
        return run_quantizer_suite(verify_config["quantizers"], jobs)
    if suite == "protocol":
        return run_protocol_suite(verify_config["protocol"])
    if suite == "theorem":
        protocol = verify_config["protocol"]
        problem = prepare_problem(synthetic_config(protocol, {}), cache_dir=cache_dir)
        return run_theorem_suite(verify_config["theorem"], problem.objective.lipschitz(), jobs)
    if suite == "figures":
        return run_figures_suite(verify_config["figures"], dataset_dir, cache_dir, jobs)
    raise ValueError(f"Unknown suite '{suite}'. Choose one of {SUITES}")
