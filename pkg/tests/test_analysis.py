import math

import numpy as np
import pandas as pd
import pytest

from analysis.reports import (
    log_suboptimality_slope,
    plateau_suboptimality,
    run_constants,
    steps_to_fraction,
    summarize_run,
    theorem_report,
)
from analysis.theorem import (
    EXPECTED_SLOPES,
    TheoremInputs,
    check_stepsize_conditions,
    corollary_stepsizes,
    evaluate_bound,
    fedbuff_limit,
    suggest_stepsizes,
    term_slopes,
)
from data_models.run_config import apply_overrides
from errors import InfeasibleStepsizeError
from sim.simulator import run_simulation

BASE = TheoremInputs(
    L=2.0, sigma_l2=1.0, B=0.5, F=1.0, T=1000, K=10, P=4, tau_max=10,
    eta_g=0.1, eta_l=0.01, delta_c=0.5, delta_s=0.5,
)


@pytest.mark.parametrize(
    "inputs, slack",
    [
        (
            dict(L=1.0, P=1, K=1, tau_max=0, eta_g=0.1, eta_l=0.1, delta_s=1.0),
            dict(server_step=0.91, staleness_drift=math.inf, local_step=0.025),
        ),
        (
            dict(L=1.0, P=1, K=1, tau_max=0, eta_g=0.1, eta_l=0.3, delta_s=1.0),
            dict(server_step=0.89, staleness_drift=math.inf, local_step=-0.175),
        ),
        (
            dict(L=2.0, P=4, K=10, tau_max=3, eta_g=0.05, eta_l=0.01, delta_s=0.5),
            dict(server_step=0.14645, staleness_drift=-3.4895833333333333e-05, local_step=0.015),
        ),
        (
            dict(L=0.5, P=2, K=5, tau_max=10, eta_g=0.02, eta_l=0.001, delta_s=0.25),
            dict(server_step=0.4087885, staleness_drift=0.001249, local_step=1.0 / 6.0 - 0.001),
        ),
        (
            dict(L=10.0, P=1, K=2, tau_max=1, eta_g=0.5, eta_l=0.01, delta_s=1.0),
            dict(server_step=-1.3, staleness_drift=2.5e-05, local_step=0.0025),
        ),
    ],
)
def test_stepsize_condition_slacks(inputs, slack):
    report = check_stepsize_conditions(TheoremInputs(T=1, **inputs))
    by_name = {c.name: c for c in report.conditions}
    for name, expected in slack.items():
        condition = by_name[name]
        if math.isinf(expected):
            assert math.isinf(condition.slack)
        else:
            assert condition.slack == pytest.approx(expected, abs=1e-9 * max(1.0, abs(expected)))
        assert condition.passed == (expected >= 0)
    assert report.passed == all(value >= 0 for value in slack.values())


def test_term_slopes_match_corollary_rates():
    slopes = term_slopes(BASE, [1000, 10_000, 100_000, 1_000_000])
    for group, expected in EXPECTED_SLOPES.items():
        assert slopes[group] == pytest.approx(expected, abs=1e-6)


def test_bound_terms_sum_to_total():
    report = evaluate_bound(BASE)
    assert report.total == pytest.approx(sum(report.terms.values()))
    assert report.groups["main_error"] == pytest.approx(
        report.terms["descent"] + report.terms["client_quant"]
    )


@pytest.mark.parametrize("field, larger", [("sigma_l2", 2.0), ("B", 5.0), ("L", 3.0), ("tau_max", 20)])
def test_bound_grows_with_problem_constants(field, larger):
    assert evaluate_bound(BASE.copy(update={field: larger})).total > evaluate_bound(BASE).total


@pytest.mark.parametrize("field", ["delta_c", "delta_s"])
def test_bound_shrinks_with_better_quantizers(field):
    assert evaluate_bound(BASE.copy(update={field: 0.9})).total < evaluate_bound(BASE).total


def test_longer_horizon_tightens_bound_at_corollary_stepsizes():
    totals = []
    for T in (1000, 2000):
        eta_l, eta_g = corollary_stepsizes(BASE.K, BASE.P, T)
        totals.append(evaluate_bound(BASE.copy(update={"T": T, "eta_l": eta_l, "eta_g": eta_g})).total)
    assert totals[1] < totals[0]


def test_zero_initial_gap_has_no_descent_term():
    assert evaluate_bound(BASE.copy(update={"F": 0.0})).terms["descent"] == 0.0


def test_fedbuff_limit_sets_lossless_quantizers():
    limit = fedbuff_limit(BASE)
    assert (limit.delta_c, limit.delta_s) == (1.0, 1.0)
    assert limit.tau_max == BASE.tau_max
    assert evaluate_bound(limit).total < evaluate_bound(BASE).total


def test_corollary_stepsizes():
    eta_l, eta_g = corollary_stepsizes(10, 4, 1000)
    assert eta_l == pytest.approx(0.005)
    assert eta_g == pytest.approx(2.5 * 1000 ** (-1.0 / 6.0))


def test_suggested_stepsizes_are_feasible():
    suggestion = suggest_stepsizes(K=10, P=4, T=1000, L=2.0, tau_max=10, delta_s=0.5)
    assert suggestion.report.passed
    assert suggestion.halvings > 0
    inputs = TheoremInputs(
        L=2.0, T=1000, K=10, P=4, tau_max=10,
        eta_g=suggestion.eta_g, eta_l=suggestion.eta_l, delta_s=0.5,
    )
    assert check_stepsize_conditions(inputs).passed


def test_infeasible_stepsizes_raise():
    with pytest.raises(InfeasibleStepsizeError):
        suggest_stepsizes(K=10, P=4, T=1000, L=1000.0, tau_max=50, delta_s=0.5, max_halvings=0)


@pytest.mark.parametrize("fields", [{"L": 0.0}, {"delta_s": 0.0}, {"delta_c": 1.5}, {"K": 0}])
def test_invalid_theorem_inputs(fields):
    with pytest.raises(ValueError):
        TheoremInputs(**{**BASE.dict(), **fields})


def _frame(values):
    return pd.DataFrame({"t": np.arange(1, len(values) + 1), "f_minus_fstar": values})


def test_steps_to_fraction():
    frame = _frame([0.9, 0.6, 0.4, 0.005])
    assert steps_to_fraction(frame, 1.0, 0.5) == 3
    assert steps_to_fraction(frame, 1.0, 0.01) == 4
    assert steps_to_fraction(frame, 1.0, 0.001) is None


def test_plateau_uses_last_tenth():
    frame = _frame([5.0] * 18 + [1.0, 3.0])
    assert plateau_suboptimality(frame) == pytest.approx(2.0)
    assert plateau_suboptimality(_frame([4.0])) == 4.0


def test_log_slope_of_exponential_decay():
    t = np.arange(1, 41)
    assert log_suboptimality_slope(_frame(np.exp(-0.1 * t))) == pytest.approx(-0.1)
    assert math.isnan(log_suboptimality_slope(_frame([1.0])))


def test_summary_of_a_run(small_config, small_problem):
    result = run_simulation(small_config, small_problem)
    summary = summarize_run(small_config, small_problem, result)
    assert summary["seed"] == small_config.seed
    assert summary["final"]["t"] == small_config.T
    assert isinstance(summary["final"]["uploads"], int)
    assert summary["totals"]["uploads"] == small_config.protocol.K * small_config.T
    assert summary["totals"]["broadcasts"] == small_config.T
    assert summary["effective_delta"] == {"client": 1.0, "server": 1.0}
    assert summary["theorem"]["covers_protocol"]
    assert summary["dataset"]["clients"] == small_config.data.n_clients
    assert summary["diverged"] == (summary["final"]["f_minus_fstar"] > summary["initial"]["f_minus_fstar"])


def test_theorem_report_needs_both_deltas(small_config, small_problem):
    constants = run_constants(small_config, small_problem)
    assert theorem_report(small_config, constants, 1.0, 3, 1.0, None) is None
    assert theorem_report(small_config, constants, 1.0, 3, None, 1.0) is None
    report = theorem_report(small_config, constants, 1.0, 3, 1.0, 1.0)
    assert report["inputs"]["tau_max"] == 3
    assert report["bound"]["total"] > 0


def test_naive_direct_is_outside_the_bound(small_config, small_problem):
    config = apply_overrides(small_config, {"protocol.mode": "naive_direct"})
    summary = summarize_run(config, small_problem, run_simulation(config, small_problem))
    assert summary["theorem"]["covers_protocol"] is False
