"""Federated objectives f(x) = sum_n w_n F_n(x) over client shards.

Two kinds are supported, both with an optional ridge term lambda/2 ||x||^2:

- ``logistic_l2``: F_n(x) = mean_i log(1 + exp(-y_i <a_i, x>)).
- ``quadratic``: F_n(x) = mean_i 1/2 ||x - b_i a_i||^2. Its Hessian is
  (1 + lambda) I and its gradient noise does not depend on x, so its
  constants have closed forms (``quadratic_constants``).

Objective math runs in float64; callers cast to the float32 model precision.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from joblib import Memory
from pydantic import BaseModel, validator
from scipy.special import expit

from errors import ObjectiveError, OracleNotConvergedError
from logger import get_logger
from objectives.datasets import ClientShard, Dataset, shards_checksum

logger = get_logger(task_name="objectives")

POWER_ITERATION_TOL = 1e-6
POWER_ITERATION_MAX_ITER = 10_000
ORACLE_TOL = 1e-8
ORACLE_MAX_ITER = 200_000


class ObjectiveKind(str, Enum):
    """Enum for the supported objectives"""

    LOGISTIC_L2 = "logistic_l2"
    QUADRATIC = "quadratic"


class ObjectiveSpec(BaseModel):
    """
    Objective kind and ridge strength. ``l2_strength=None`` means 1/m, the
    inverse of the number of training rows.
    """

    kind: ObjectiveKind = ObjectiveKind.LOGISTIC_L2
    l2_strength: Optional[float] = None

    class Config:
        frozen = True
        extra = "forbid"

    @validator("l2_strength", allow_reuse=True)
    def non_negative(cls, v):
        if v is not None and not (v >= 0.0 and math.isfinite(v)):
            raise ValueError(f"l2_strength must be finite and >= 0. Given {v}")
        return v

    def resolved_l2(self, num_rows: int) -> float:
        return 1.0 / num_rows if self.l2_strength is None else float(self.l2_strength)


def log1p_exp_neg(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(-z)), branched at 0 so neither side overflows."""
    out = np.empty_like(z, dtype=np.float64)
    positive = z > 0
    out[positive] = np.log1p(np.exp(-z[positive]))
    out[~positive] = -z[~positive] + np.log1p(np.exp(z[~positive]))
    return out


def _check_dimension(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != d:
        raise ObjectiveError(f"model has shape {x.shape}, expected ({d},)")
    return x


def _rows_loss(kind: ObjectiveKind, features, labels, x: np.ndarray) -> np.ndarray:
    """Per-row data loss (no ridge term, no shared quadratic term)."""
    if kind == ObjectiveKind.LOGISTIC_L2:
        return log1p_exp_neg(labels * (features @ x))
    ax = features @ x
    row_sq = np.asarray(features.multiply(features).sum(axis=1)).ravel()
    return -labels * ax + 0.5 * labels ** 2 * row_sq


def _shared_coefficient(kind: ObjectiveKind, l2: float) -> float:
    """Coefficient c of the c/2 * ||x||^2 term common to every row, ridge included."""
    if kind == ObjectiveKind.QUADRATIC:
        return 1.0 + l2
    return l2


def _rows_gradient_coefficients(kind: ObjectiveKind, features, labels, x):
    """Per-row c_i with data gradient_i = c_i * a_i (+ x for quadratic)."""
    if kind == ObjectiveKind.LOGISTIC_L2:
        return -labels * expit(-labels * (features @ x))
    return -labels


def _weighted_gradient(kind, features, labels, coefficients, x, l2):
    """sum_i coefficients_i * grad_i(x) plus the ridge term; coefficients sum to 1."""
    row_coef = _rows_gradient_coefficients(kind, features, labels, x) * coefficients
    return features.T @ row_coef + _shared_coefficient(kind, l2) * x


@dataclass
class FederatedObjective:
    """
    An objective bound to a dataset and its shards.

    The global loss is evaluated in one pass over the shard rows stacked in
    client order, each row weighted by w_n / m_n; this equals sum_n w_n F_n.
    """

    spec: ObjectiveSpec
    dataset: Dataset
    shards: Sequence[ClientShard]
    l2: float = field(init=False)
    _features: sp.csr_matrix = field(init=False, repr=False)
    _labels: np.ndarray = field(init=False, repr=False)
    _row_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.shards:
            raise ObjectiveError("objective needs at least one shard")
        for shard in self.shards:
            if shard.size == 0:
                raise ObjectiveError(f"shard of client {shard.client_id} is empty")
        total_weight = sum(shard.weight for shard in self.shards)
        if not math.isclose(total_weight, 1.0, rel_tol=1e-9):
            raise ObjectiveError(f"client weights sum to {total_weight}, expected 1")
        self.l2 = self.spec.resolved_l2(self.dataset.num_rows)
        self._features = sp.vstack([s.features for s in self.shards], format="csr")
        self._labels = np.concatenate([s.labels for s in self.shards])
        self._row_weights = np.concatenate(
            [np.full(s.size, s.weight / s.size) for s in self.shards]
        )

    @property
    def dimension(self) -> int:
        return self.dataset.num_features

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def checksum(self) -> str:
        return f"{self.dataset.checksum}:{shards_checksum(self.shards)}"

    def loss(self, x) -> float:
        x = _check_dimension(x, self.dimension)
        rows = _rows_loss(self.spec.kind, self._features, self._labels, x)
        shared = _shared_coefficient(self.spec.kind, self.l2)
        return float(self._row_weights @ rows + 0.5 * shared * (x @ x))

    def gradient(self, x) -> np.ndarray:
        x = _check_dimension(x, self.dimension)
        return _weighted_gradient(
            self.spec.kind, self._features, self._labels, self._row_weights, x, self.l2
        )

    def client_loss(self, client_id: int, x) -> float:
        return shard_loss(self.spec, self.shards[client_id], x, self.l2)

    def client_gradient(self, client_id: int, x) -> np.ndarray:
        return client_gradient(self.spec, self.shards[client_id], x, self.l2)

    def client_gradients(self, x) -> np.ndarray:
        """(N, d) array of every client's full-shard gradient."""
        return np.stack([self.client_gradient(s.client_id, x) for s in self.shards])

    def stochastic_gradient(self, client_id, x, batch_size, rng, full_batch=False):
        return stochastic_gradient(
            self.spec, self.shards[client_id], x, batch_size, rng, self.l2, full_batch
        )

    def lipschitz(self) -> float:
        """L of the global objective."""
        if self.spec.kind == ObjectiveKind.QUADRATIC:
            return 1.0 + self.l2
        return self.l2 + 0.25 * _largest_eigenvalue(self._features, self._row_weights)

    def client_lipschitz(self) -> float:
        """Largest L_n over clients."""
        if self.spec.kind == ObjectiveKind.QUADRATIC:
            return 1.0 + self.l2
        return max(
            self.l2 + 0.25 * _largest_eigenvalue(s.features, np.full(s.size, 1.0 / s.size))
            for s in self.shards
        )


def shard_loss(spec: ObjectiveSpec, shard: ClientShard, x, l2: float) -> float:
    """F_n(x): mean regularized loss over the shard."""
    if shard.size == 0:
        raise ObjectiveError(f"shard of client {shard.client_id} is empty")
    x = _check_dimension(x, shard.features.shape[1])
    rows = _rows_loss(spec.kind, shard.features, shard.labels, x)
    return float(rows.mean() + 0.5 * _shared_coefficient(spec.kind, l2) * (x @ x))


def client_gradient(spec: ObjectiveSpec, shard: ClientShard, x, l2: float) -> np.ndarray:
    """Full-shard gradient of F_n at x."""
    if shard.size == 0:
        raise ObjectiveError(f"shard of client {shard.client_id} is empty")
    x = _check_dimension(x, shard.features.shape[1])
    weights = np.full(shard.size, 1.0 / shard.size)
    return _weighted_gradient(spec.kind, shard.features, shard.labels, weights, x, l2)


def stochastic_gradient(
    spec: ObjectiveSpec,
    shard: ClientShard,
    x,
    batch_size: int,
    rng: np.random.Generator,
    l2: float,
    full_batch: bool = False,
) -> np.ndarray:
    """
    Minibatch gradient of F_n at x.

    Rows are drawn uniformly with replacement, so the expectation over rng is
    the full-shard gradient. ``full_batch`` returns that gradient exactly and
    draws nothing.

    Args:
        spec (ObjectiveSpec): The objective.
        shard (ClientShard): The client's data.
        x (array-like): Point of evaluation.
        batch_size (int): Rows per minibatch, at least 1.
        rng (np.random.Generator): Sampling stream.
        l2 (float): Resolved ridge strength.
        full_batch (bool): Deterministic full-shard gradient.

    Returns:
        np.ndarray: The float64 gradient estimate.
    """
    if shard.size == 0:
        raise ObjectiveError(f"shard of client {shard.client_id} is empty")
    if batch_size < 1:
        raise ObjectiveError(f"batch_size must be positive. Given {batch_size}")
    if full_batch:
        return client_gradient(spec, shard, x, l2)
    x = _check_dimension(x, shard.features.shape[1])
    rows = rng.integers(0, shard.size, size=batch_size)
    weights = np.full(batch_size, 1.0 / batch_size)
    return _weighted_gradient(
        spec.kind, shard.features[rows], shard.labels[rows], weights, x, l2
    )


def per_sample_gradients(spec: ObjectiveSpec, shard: ClientShard, x, l2: float) -> np.ndarray:
    """(m_n, d) dense array of per-row gradients of the regularized loss."""
    x = _check_dimension(x, shard.features.shape[1])
    coef = _rows_gradient_coefficients(spec.kind, shard.features, shard.labels, x)
    grads = shard.features.multiply(coef[:, None]).toarray()
    return grads + _shared_coefficient(spec.kind, l2) * x


def global_loss(spec: ObjectiveSpec, dataset: Dataset, shards, x) -> float:
    """f(x) = sum_n w_n F_n(x)."""
    return FederatedObjective(spec, dataset, shards).loss(x)


def full_gradient(spec: ObjectiveSpec, dataset: Dataset, shards, x) -> np.ndarray:
    """Gradient of f at x."""
    return FederatedObjective(spec, dataset, shards).gradient(x)


def _largest_eigenvalue(features: sp.csr_matrix, row_weights: np.ndarray) -> float:
    """
    Largest eigenvalue of A^T diag(row_weights) A by power iteration, stopped
    when the Rayleigh quotient changes by less than POWER_ITERATION_TOL (relative).
    """
    d = features.shape[1]
    v = np.full(d, 1.0 / math.sqrt(d))
    estimate = 0.0
    for _ in range(POWER_ITERATION_MAX_ITER):
        w = features.T @ (row_weights * (features @ v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        new_estimate = float(v @ w)
        v = w / norm
        if abs(new_estimate - estimate) <= POWER_ITERATION_TOL * abs(new_estimate):
            return new_estimate
        estimate = new_estimate
    logger.warning("Power iteration hit its iteration cap")
    return estimate


class OracleResult(BaseModel):
    x_star: List[float]
    f_star: float
    grad_norm: float
    iterations: int
    converged: bool


def _accelerated_descent(
    loss: Callable, grad: Callable, x0: np.ndarray, tol: float, max_iter: int
) -> OracleResult:
    # Nesterov momentum, backtracking on a local Lipschitz estimate of the
    # gradient, momentum reset when the step and momentum disagree.
    x = x0.copy()
    g_x = grad(x)
    best_x, best_g = x.copy(), float(np.linalg.norm(g_x))
    if best_g <= tol:
        return OracleResult(x_star=best_x.tolist(), f_star=loss(best_x), grad_norm=best_g,
                            iterations=0, converged=True)

    probe = x - 1e-4 * g_x / best_g
    lipschitz = max(float(np.linalg.norm(grad(probe) - g_x)) / 1e-4, 1e-12)
    y, g_y = x, g_x
    momentum = 1.0
    for iteration in range(1, max_iter + 1):
        while True:
            x_new = y - g_y / lipschitz
            g_new = grad(x_new)
            step_norm = float(np.linalg.norm(x_new - y))
            if step_norm == 0.0 or float(np.linalg.norm(g_new - g_y)) <= lipschitz * step_norm:
                break
            lipschitz *= 2.0
        g_norm = float(np.linalg.norm(g_new))
        if g_norm < best_g:
            best_x, best_g = x_new.copy(), g_norm
        if g_norm <= tol:
            return OracleResult(x_star=x_new.tolist(), f_star=loss(x_new), grad_norm=g_norm,
                                iterations=iteration, converged=True)
        if float(g_y @ (x_new - x)) > 0.0:
            momentum = 1.0
            x = y = x_new
            g_y = g_new
            continue
        next_momentum = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum ** 2))
        y = x_new + ((momentum - 1.0) / next_momentum) * (x_new - x)
        x, momentum = x_new, next_momentum
        g_y = grad(y)
    return OracleResult(x_star=best_x.tolist(), f_star=loss(best_x), grad_norm=best_g,
                        iterations=max_iter, converged=False)


def minimize_oracle(
    spec: ObjectiveSpec,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    x0=None,
    tol: float = ORACLE_TOL,
    max_iter: int = ORACLE_MAX_ITER,
    raise_on_failure: bool = True,
) -> OracleResult:
    """
    Minimizes f with deterministic full-batch accelerated gradient descent.

    Args:
        spec (ObjectiveSpec): A convex objective.
        dataset (Dataset): Training rows.
        shards (Sequence[ClientShard]): Client split and weights.
        x0 (array-like, optional): Starting point; the origin by default.
        tol (float): Stop when ||grad f|| <= tol.
        max_iter (int): Iteration cap.
        raise_on_failure (bool): Raise when the cap is hit; otherwise return
            the best iterate with ``converged=False``.

    Returns:
        OracleResult: Minimizer, minimum, final gradient norm and iteration count.

    Raises:
        OracleNotConvergedError: The cap was hit (carries the best iterate).
    """
    objective = FederatedObjective(spec, dataset, shards)
    d = objective.dimension
    start = np.zeros(d) if x0 is None else _check_dimension(x0, d)
    result = _accelerated_descent(objective.loss, objective.gradient, start, tol, max_iter)
    if not result.converged:
        message = (
            f"minimizer stopped after {result.iterations} iterations "
            f"with ||grad|| = {result.grad_norm:.3e} > {tol:.1e}"
        )
        if raise_on_failure:
            raise OracleNotConvergedError(message, np.asarray(result.x_star), result.f_star)
        logger.warning(message)
    return result


def cached_minimize(
    spec: ObjectiveSpec,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    cache_dir: Optional[str] = None,
    tol: float = ORACLE_TOL,
) -> OracleResult:
    """
    ``minimize_oracle`` from the origin, memoized on disk under cache_dir,
    keyed by dataset and shard checksums, kind, lambda and tol.
    """
    memory = Memory(location=cache_dir, verbose=0)
    solve = memory.cache(_solve_for_optimum, ignore=["dataset", "shards"])
    objective_key = FederatedObjective(spec, dataset, shards).checksum
    return OracleResult(
        **solve(objective_key, spec.kind.value, spec.l2_strength, tol, dataset, shards)
    )


def _solve_for_optimum(checksum, kind, l2_strength, tol, dataset, shards) -> dict:
    logger.info(f"Solving for f* ({kind}, objective {checksum[:12]})...")
    spec = ObjectiveSpec(kind=kind, l2_strength=l2_strength)
    if spec.kind == ObjectiveKind.QUADRATIC:
        return quadratic_minimizer(spec, dataset, shards).dict()
    return minimize_oracle(spec, dataset, shards, tol=tol).dict()


class ObjectiveConstants(BaseModel):
    """Smoothness, noise, heterogeneity and optimum of one problem."""

    L: float
    L_clients: float
    sigma_l2: float
    B: float
    B_max: float
    f_star: float
    batch_size: int
    probes: int


def _minibatch_variance(spec, shard, x, l2, batch_size) -> float:
    # exact variance of a with-replacement minibatch mean around grad F_n
    grads = per_sample_gradients(spec, shard, x, l2)
    centered = grads - grads.mean(axis=0)
    return float((centered ** 2).sum(axis=1).mean()) / batch_size


def _heterogeneity(objective: FederatedObjective, x) -> tuple:
    gaps = objective.client_gradients(x) - objective.gradient(x)
    per_client = (gaps ** 2).sum(axis=1)
    return float(per_client.mean()), float(per_client.max())


def probe_points(
    d: int, probes: int, rng: np.random.Generator, x_star: Optional[np.ndarray]
) -> List[np.ndarray]:
    """The origin, then x* (when known), then Gaussian perturbations of x*."""
    center = np.zeros(d) if x_star is None else np.asarray(x_star, dtype=np.float64)
    points = [np.zeros(d)]
    if x_star is not None:
        points.append(center.copy())
    while len(points) < probes:
        points.append(center + rng.standard_normal(d))
    return points[:probes]


def estimate_constants(
    spec: ObjectiveSpec,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    probes: int,
    rng: np.random.Generator,
    batch_size: int = 1,
    oracle: Optional[OracleResult] = None,
) -> ObjectiveConstants:
    """
    Estimates the constants the convergence bound depends on.

    L comes from power iteration (logistic) or is exact (quadratic).
    sigma_l2 is the largest minibatch-gradient variance over probe points and
    clients; B averages ||grad f - grad F_n||^2 over clients (B_max takes the
    largest client) and is maximized over probe points.

    Args:
        spec (ObjectiveSpec): The objective.
        dataset (Dataset): Training rows.
        shards (Sequence[ClientShard]): Client split.
        probes (int): Number of probe points, at least 1.
        rng (np.random.Generator): Probe stream.
        batch_size (int): Minibatch size the variance refers to.
        oracle (OracleResult, optional): Precomputed minimizer.

    Returns:
        ObjectiveConstants
    """
    if probes < 1:
        raise ObjectiveError(f"probes must be at least 1. Given {probes}")
    objective = FederatedObjective(spec, dataset, shards)
    if spec.kind == ObjectiveKind.QUADRATIC:
        return quadratic_constants(spec, dataset, shards, batch_size, probes)
    if oracle is None:
        oracle = minimize_oracle(spec, dataset, shards)
    x_star = np.asarray(oracle.x_star)

    sigma_l2 = b_mean = b_max = 0.0
    for point in probe_points(objective.dimension, probes, rng, x_star):
        for shard in shards:
            sigma_l2 = max(
                sigma_l2, _minibatch_variance(spec, shard, point, objective.l2, batch_size)
            )
        mean_gap, max_gap = _heterogeneity(objective, point)
        b_mean, b_max = max(b_mean, mean_gap), max(b_max, max_gap)

    return ObjectiveConstants(
        L=objective.lipschitz(),
        L_clients=objective.client_lipschitz(),
        sigma_l2=sigma_l2,
        B=b_mean,
        B_max=b_max,
        f_star=oracle.f_star,
        batch_size=batch_size,
        probes=probes,
    )


def quadratic_constants(
    spec: ObjectiveSpec,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    batch_size: int = 1,
    probes: int = 1,
) -> ObjectiveConstants:
    """
    Closed-form constants of the quadratic objective.

    Per-row gradients are (1 + lambda) x - b_i a_i, so the noise is the spread
    of b_i a_i inside a shard and the heterogeneity is the spread of the shard
    means c_n; both are independent of x. The minimizer is
    x* = sum_n w_n c_n / (1 + lambda).
    """
    if spec.kind != ObjectiveKind.QUADRATIC:
        raise ObjectiveError("quadratic_constants requires the quadratic objective")
    objective = FederatedObjective(spec, dataset, shards)
    targets = []
    sigma_l2 = 0.0
    for shard in shards:
        scaled = shard.features.multiply(shard.labels[:, None]).toarray()
        center = scaled.mean(axis=0)
        targets.append(center)
        spread = float(((scaled - center) ** 2).sum(axis=1).mean())
        sigma_l2 = max(sigma_l2, spread / batch_size)
    targets = np.stack(targets)
    weights = np.array([shard.weight for shard in shards])
    mean_target = weights @ targets
    per_client = ((targets - mean_target) ** 2).sum(axis=1)
    x_star = mean_target / (1.0 + objective.l2)
    return ObjectiveConstants(
        L=1.0 + objective.l2,
        L_clients=1.0 + objective.l2,
        sigma_l2=sigma_l2,
        B=float(per_client.mean()),
        B_max=float(per_client.max()),
        f_star=objective.loss(x_star),
        batch_size=batch_size,
        probes=probes,
    )


def quadratic_minimizer(spec: ObjectiveSpec, dataset: Dataset, shards) -> OracleResult:
    """Exact minimizer of the quadratic objective."""
    objective = FederatedObjective(spec, dataset, shards)
    targets = np.stack(
        [s.features.multiply(s.labels[:, None]).toarray().mean(axis=0) for s in shards]
    )
    weights = np.array([s.weight for s in shards])
    x_star = (weights @ targets) / (1.0 + objective.l2)
    return OracleResult(
        x_star=x_star.tolist(),
        f_star=objective.loss(x_star),
        grad_norm=float(np.linalg.norm(objective.gradient(x_star))),
        iterations=0,
        converged=True,
    )
