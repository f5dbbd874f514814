import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from errors import ObjectiveError, OracleNotConvergedError
from objectives.datasets import partition
from objectives.objectives import (
    FederatedObjective,
    ObjectiveSpec,
    cached_minimize,
    client_gradient,
    estimate_constants,
    full_gradient,
    global_loss,
    minimize_oracle,
    per_sample_gradients,
    quadratic_constants,
    stochastic_gradient,
)

LOGISTIC = ObjectiveSpec(kind="logistic_l2")


def test_half_norm_sq_loss_at_origin(half_norm_sq_data, half_norm_sq_spec):
    dataset, shards = half_norm_sq_data
    assert global_loss(half_norm_sq_spec, dataset, shards, np.zeros(1)) == 0.0


def test_logistic_loss_at_origin_is_log_two(logistic_data):
    dataset, shards = logistic_data
    assert global_loss(LOGISTIC, dataset, shards, np.zeros(8)) == pytest.approx(math.log(2.0))


def test_default_l2_is_inverse_row_count(logistic_data):
    dataset, shards = logistic_data
    assert FederatedObjective(LOGISTIC, dataset, shards).l2 == pytest.approx(1.0 / 200)


def test_half_norm_sq_gradient_ignores_data(half_norm_sq_data, half_norm_sq_spec, rng):
    _, shards = half_norm_sq_data
    for batch_size in (1, 3, 6):
        g = stochastic_gradient(half_norm_sq_spec, shards[0], np.array([2.0]), batch_size, rng, 0.0)
        assert g.tolist() == [2.0]


def test_half_norm_sq_full_gradient_is_exact(half_norm_sq_data, half_norm_sq_spec, rng):
    dataset, shards = half_norm_sq_data
    x = np.array([2.0])
    assert full_gradient(half_norm_sq_spec, dataset, shards, x).tolist() == [2.0]
    assert stochastic_gradient(
        half_norm_sq_spec, shards[0], x, 6, rng, 0.0, full_batch=True
    ).tolist() == [2.0]
    assert per_sample_gradients(half_norm_sq_spec, shards[0], x, 0.0).ravel().tolist() == [2.0] * 6


def test_full_batch_gradient_is_exact(logistic_data, rng):
    dataset, shards = logistic_data
    x = rng.standard_normal(8)
    exact = client_gradient(LOGISTIC, shards[1], x, 0.01)
    g = stochastic_gradient(LOGISTIC, shards[1], x, 4, rng, 0.01, full_batch=True)
    assert np.array_equal(g, exact)


def test_minibatch_gradient_is_unbiased(logistic_data):
    dataset, shards = logistic_data
    x = np.linspace(-1.0, 1.0, 8)
    rng = np.random.default_rng(0)
    draws = np.stack(
        [stochastic_gradient(LOGISTIC, shards[0], x, 5, rng, 0.01) for _ in range(5000)]
    )
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    exact = client_gradient(LOGISTIC, shards[0], x, 0.01)
    assert np.all(np.abs(draws.mean(axis=0) - exact) <= 5 * se + 1e-12)


def test_global_gradient_matches_finite_differences(logistic_data, rng):
    dataset, shards = logistic_data
    x = 0.3 * rng.standard_normal(8)
    objective = FederatedObjective(LOGISTIC, dataset, shards)
    step = 1e-6
    numeric = np.array(
        [
            (objective.loss(x + step * e) - objective.loss(x - step * e)) / (2 * step)
            for e in np.eye(8)
        ]
    )
    assert np.allclose(objective.gradient(x), numeric, atol=1e-7)


def test_global_gradient_is_weighted_client_sum(logistic_data, rng):
    dataset, shards = logistic_data
    x = rng.standard_normal(8)
    objective = FederatedObjective(LOGISTIC, dataset, shards)
    weighted = sum(s.weight * objective.client_gradient(s.client_id, x) for s in shards)
    assert np.allclose(full_gradient(LOGISTIC, dataset, shards, x), weighted)


def test_per_sample_gradients_average_to_client_gradient(quadratic_data, rng):
    dataset, shards = quadratic_data
    spec = ObjectiveSpec(kind="quadratic", l2_strength=0.1)
    x = rng.standard_normal(5)
    grads = per_sample_gradients(spec, shards[0], x, 0.1)
    assert np.allclose(grads.mean(axis=0), client_gradient(spec, shards[0], x, 0.1))


def test_dimension_mismatch_is_rejected(logistic_data):
    dataset, shards = logistic_data
    with pytest.raises(ObjectiveError):
        global_loss(LOGISTIC, dataset, shards, np.zeros(3))


def test_half_norm_sq_minimizer(half_norm_sq_data, half_norm_sq_spec):
    dataset, shards = half_norm_sq_data
    result = minimize_oracle(half_norm_sq_spec, dataset, shards, x0=np.array([5.0]))
    assert result.x_star == pytest.approx([0.0], abs=1e-8)
    assert result.f_star == pytest.approx(0.0, abs=1e-12)
    assert result.converged


def test_logistic_minimizer_is_start_independent(logistic_data):
    dataset, shards = logistic_data
    spec = ObjectiveSpec(kind="logistic_l2", l2_strength=0.01)
    tol = 1e-8
    from_origin = minimize_oracle(spec, dataset, shards, tol=tol)
    from_elsewhere = minimize_oracle(spec, dataset, shards, x0=np.full(8, 3.0), tol=tol)
    assert abs(from_origin.f_star - from_elsewhere.f_star) <= 10 * tol
    assert from_origin.grad_norm <= tol


def test_logistic_minimizer_agrees_with_sklearn(logistic_data):
    dataset, _ = logistic_data
    shards = partition(dataset, 1, np.random.default_rng(0))
    lam = 0.05
    spec = ObjectiveSpec(kind="logistic_l2", l2_strength=lam)
    ours = minimize_oracle(spec, dataset, shards)
    # sklearn minimizes 1/2 ||w||^2 + C sum_i loss_i, i.e. our objective with C = 1 / (m lam)
    reference = LogisticRegression(
        C=1.0 / (dataset.num_rows * lam), fit_intercept=False, tol=1e-10, max_iter=10_000
    ).fit(dataset.features, dataset.labels)
    assert np.allclose(ours.x_star, reference.coef_.ravel(), atol=1e-4)


def test_oracle_reports_best_iterate_when_capped(logistic_data):
    dataset, shards = logistic_data
    with pytest.raises(OracleNotConvergedError) as info:
        minimize_oracle(LOGISTIC, dataset, shards, tol=1e-14, max_iter=3)
    assert info.value.x_best.shape == (8,)
    assert np.isfinite(info.value.f_best)
    capped = minimize_oracle(
        LOGISTIC, dataset, shards, tol=1e-14, max_iter=3, raise_on_failure=False
    )
    assert not capped.converged


def test_cached_minimize_reuses_disk_cache(tmp_path, logistic_data):
    dataset, shards = logistic_data
    first = cached_minimize(LOGISTIC, dataset, shards, cache_dir=str(tmp_path))
    assert any(tmp_path.iterdir())
    second = cached_minimize(LOGISTIC, dataset, shards, cache_dir=str(tmp_path))
    assert second.f_star == first.f_star
    assert second.x_star == first.x_star


def test_half_norm_sq_constants(half_norm_sq_data, half_norm_sq_spec):
    dataset, shards = half_norm_sq_data
    constants = quadratic_constants(half_norm_sq_spec, dataset, shards)
    assert constants.L == 1.0
    assert constants.sigma_l2 == 0.0
    assert constants.B == 0.0
    assert constants.f_star == 0.0


def test_quadratic_constants_match_estimator_form(quadratic_data):
    dataset, shards = quadratic_data
    spec = ObjectiveSpec(kind="quadratic", l2_strength=0.5)
    constants = quadratic_constants(spec, dataset, shards, batch_size=2)
    objective = FederatedObjective(spec, dataset, shards)
    x = np.ones(5)
    gaps = objective.client_gradients(x) - objective.gradient(x)
    assert constants.L == pytest.approx(1.5)
    assert constants.B == pytest.approx(float((gaps ** 2).sum(axis=1).mean()))
    worst_noise = max(
        float(
            ((per_sample_gradients(spec, s, x, 0.5) - objective.client_gradient(s.client_id, x)) ** 2)
            .sum(axis=1)
            .mean()
        )
        for s in shards
    )
    assert constants.sigma_l2 == pytest.approx(worst_noise / 2)


def test_single_client_has_no_heterogeneity(logistic_data, rng):
    dataset, _ = logistic_data
    shards = partition(dataset, 1, np.random.default_rng(0))
    constants = estimate_constants(LOGISTIC, dataset, shards, probes=3, rng=rng)
    assert constants.B == pytest.approx(0.0, abs=1e-20)
    assert constants.B_max == pytest.approx(0.0, abs=1e-20)


def test_logistic_smoothness_bounds(logistic_data, rng):
    dataset, shards = logistic_data
    objective = FederatedObjective(LOGISTIC, dataset, shards)
    constants = estimate_constants(LOGISTIC, dataset, shards, probes=2, rng=rng, batch_size=4)
    dense = dataset.features.toarray()
    exact = np.linalg.eigvalsh(dense.T @ dense / (4 * dataset.num_rows)).max() + objective.l2
    assert constants.L == pytest.approx(exact, rel=1e-3)
    assert constants.L_clients >= constants.L * (1 - 1e-3)
    assert constants.sigma_l2 > 0
    assert constants.batch_size == 4


def test_estimate_constants_needs_a_probe(logistic_data, rng):
    dataset, shards = logistic_data
    with pytest.raises(ObjectiveError):
        estimate_constants(LOGISTIC, dataset, shards, probes=0, rng=rng)
