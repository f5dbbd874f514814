"""Empirical contraction, unbiasedness and wire-format checks for quantizers."""
import math
from functools import lru_cache
from typing import Iterator, List, Optional

import numpy as np
from pydantic import BaseModel, validator
from scipy import stats

from errors import QuantizerError
from logger import get_logger
from quantizers.quantizers import (
    MODEL_DTYPE,
    NormKind,
    QuantizedMessage,
    QuantizerKind,
    QuantizerSpec,
    as_model_vector,
    decode,
    expected_size_bits,
    quantize,
    sample_reconstructions,
)

logger = get_logger(task_name="quantizers")

MIN_TRIALS = 1000
# Seed of the fixed Gaussian family behind effective_delta.
DELTA_SEED = 20_231_108
DELTA_GAUSSIAN_VECTORS = 20_000
# Standard deviations of the Gaussian-family ratios added to its worst ratio.
CERTIFY_SPREAD = 1.0
# Relative allowance for float32 rounding of the reconstruction.
CERTIFY_ROUNDING = 1e-6
GEOMETRIC_DECAY = 0.9
TOLERANCE_SE = 4.0
# Family-wise false-alarm rate of the per-coordinate unbiasedness test.
UNBIASED_ALPHA = 1e-3
_CHUNK = 1000
_CERTIFY_BLOCK_VALUES = 2 ** 21


class DeltaParam(BaseModel):
    """Contraction parameter of a quantizer."""

    delta: float

    @validator("delta", allow_reuse=True)
    def delta_in_range(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"delta must be in (0, 1]. Given {v}")
        return v


class VectorRatio(BaseModel):
    family: str
    ratio: float
    standard_error: float


class ContractionReport(BaseModel):
    """Outcome of ``verify_contraction``. ``passed`` is the conjunction of all checks."""

    quantizer: str
    d: int
    trials: int
    delta: Optional[float]
    max_ratio: float
    required_max_ratio: Optional[float]
    contraction_passed: bool
    vectors: List[VectorRatio]
    unbiased_passed: Optional[bool] = None
    max_unbiased_z: Optional[float] = None
    unbiased_z_threshold: Optional[float] = None
    ratio_upper_bound: Optional[float] = None
    remark_passed: Optional[bool] = None
    remark_mean_slack: Optional[float] = None
    remark_standard_error: Optional[float] = None
    roundtrip_passed: bool
    size_passed: bool
    encoded_size_bits: int
    expected_size_bits: int
    passed: bool


def adversarial_vectors(d: int) -> List[tuple]:
    """One-hot, constant and geometric-decay vectors."""
    one_hot = np.zeros(d)
    one_hot[0] = 1.0
    vectors = [
        ("one_hot", one_hot),
        ("constant", np.ones(d)),
        ("geometric", GEOMETRIC_DECAY ** np.arange(d)),
    ]
    return [(family, as_model_vector(x)) for family, x in vectors]


def check_vectors(d: int, rng: np.random.Generator, n_gaussian: int) -> List[tuple]:
    """Gaussian vectors drawn from rng followed by the adversarial vectors."""
    gaussian = [("gaussian", as_model_vector(rng.standard_normal(d))) for _ in range(n_gaussian)]
    return gaussian + adversarial_vectors(d)


def qsgd_expected_ratios(spec: QuantizerSpec, vectors: np.ndarray) -> np.ndarray:
    """
    Exact E||x - Q(x)||^2 / ||x||^2 for each row of ``vectors``.

    Stochastic rounding of r_i = s |x_i| / scale has variance frac(r_i)(1 - frac(r_i)),
    so the expected error is (scale / s)^2 * sum_i frac(r_i)(1 - frac(r_i)).
    Rows are rounded to float32 first, as ``quantize`` does.
    """
    x64 = np.atleast_2d(vectors).astype(MODEL_DTYPE).astype(np.float64)
    abs_x = np.abs(x64)
    if spec.norm == NormKind.LINF:
        norms = abs_x.max(axis=1)
    else:
        norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    scales = norms.astype(MODEL_DTYPE)
    scales = np.where(
        scales.astype(np.float64) < norms, np.nextafter(scales, MODEL_DTYPE(np.inf)), scales
    ).astype(np.float64)
    s = spec.levels
    safe = np.where(scales > 0.0, scales, 1.0)
    ratio = s * abs_x / safe[:, None]
    frac = ratio - np.floor(ratio)
    errors = (safe / s) ** 2 * np.sum(frac * (1.0 - frac), axis=1)
    norm_sq = np.einsum("ij,ij->i", x64, x64)
    return np.where(norm_sq > 0.0, errors / np.where(norm_sq > 0.0, norm_sq, 1.0), 0.0)


def qsgd_ratio_upper_bound(spec: QuantizerSpec, d: int) -> float:
    """
    Upper bound on E||x - Q(x)||^2 / ||x||^2 over all nonzero x in R^d, attained
    for max-norm scaling.

    max-norm scaling: (sqrt(1 + (d - 1) / s^2) - 1) / 2, attained by one coordinate at
    the scale and the others at 1 / (2 s (1 + R)) of it.
    L2 scaling: d / (4 s^2) when d <= 4 s^2, else sqrt(d) / s - 1.
    """
    s = spec.levels
    if spec.norm == NormKind.LINF:
        return 0.5 * (math.sqrt(1.0 + (d - 1) / s ** 2) - 1.0)
    if d <= 4 * s ** 2:
        return d / (4.0 * s ** 2)
    return math.sqrt(d) / s - 1.0


def _gaussian_blocks(d: int) -> Iterator[np.ndarray]:
    rng = np.random.default_rng([DELTA_SEED, d])
    rows = max(1, _CERTIFY_BLOCK_VALUES // d)
    remaining = DELTA_GAUSSIAN_VECTORS
    while remaining > 0:
        n = min(rows, remaining)
        yield rng.standard_normal((n, d))
        remaining -= n


def _squared_norm(x: np.ndarray) -> float:
    x64 = x.astype(np.float64)
    return float(np.dot(x64, x64))


def error_ratio(
    spec: QuantizerSpec, x: np.ndarray, rng: np.random.Generator, draws: int
) -> tuple:
    """
    Monte-Carlo estimate of E||x - Q(x)||^2 / ||x||^2 and its standard error.
    Deterministic quantizers are evaluated once.
    """
    norm_sq = _squared_norm(x)
    if spec.kind != QuantizerKind.QSGD:
        _, reconstruction = quantize(spec, x, rng)
        return _squared_norm(x - reconstruction) / norm_sq, 0.0

    errors = []
    remaining = draws
    x64 = x.astype(np.float64)
    while remaining > 0:
        n = min(_CHUNK, remaining)
        samples = sample_reconstructions(spec, x, rng, n).astype(np.float64)
        errors.append(np.sum((samples - x64) ** 2, axis=1))
        remaining -= n
    errors = np.concatenate(errors) / norm_sq
    return float(errors.mean()), float(errors.std(ddof=1) / np.sqrt(errors.size))


@lru_cache(maxsize=None)
def certified_error_ratio(spec: QuantizerSpec, d: int) -> float:
    """
    The error ratio behind the qsgd delta: the worst exact ratio over a fixed
    Gaussian family and the adversarial vectors, plus one standard deviation of
    the Gaussian ratios, capped by ``qsgd_ratio_upper_bound``.
    """
    gaussian = np.concatenate([qsgd_expected_ratios(spec, block) for block in _gaussian_blocks(d)])
    adversarial = qsgd_expected_ratios(spec, np.stack([x for _, x in adversarial_vectors(d)]))
    worst = max(float(gaussian.max()), float(adversarial.max()))
    spread = CERTIFY_SPREAD * float(gaussian.std())
    bound = min(worst + spread, qsgd_ratio_upper_bound(spec, d))
    return bound * (1.0 + CERTIFY_ROUNDING)


def effective_delta(spec: QuantizerSpec, d: Optional[int] = None) -> DeltaParam:
    """
    Returns the contraction parameter used by the convergence analysis.

    Args:
        spec (QuantizerSpec): The quantizer.
        d (int, optional): Vector dimension; required for qsgd.

    Returns:
        DeltaParam: 1 for identity, keep_fraction for topk, and for qsgd
            1 - ``certified_error_ratio(spec, d)``.

    Raises:
        QuantizerError: If qsgd is requested without d, or does not contract
            at this (bits, d).
    """
    if spec.kind == QuantizerKind.IDENTITY:
        return DeltaParam(delta=1.0)
    if spec.kind == QuantizerKind.TOPK:
        return DeltaParam(delta=spec.keep_fraction)
    if d is None:
        raise QuantizerError("effective_delta for qsgd requires the dimension d")
    delta = 1.0 - certified_error_ratio(spec, int(d))
    if delta <= 0.0:
        raise QuantizerError(
            f"{spec.describe()} does not contract at d={d}: "
            f"certified error ratio {1.0 - delta:.4f} >= 1"
        )
    return DeltaParam(delta=min(delta, 1.0))


def _check_unbiased(
    spec: QuantizerSpec, d: int, rng: np.random.Generator, draws: int
) -> tuple:
    x = as_model_vector(rng.standard_normal(d))
    total = np.zeros(d)
    total_sq = np.zeros(d)
    remaining = draws
    while remaining > 0:
        n = min(_CHUNK, remaining)
        samples = sample_reconstructions(spec, x, rng, n).astype(np.float64)
        total += samples.sum(axis=0)
        total_sq += (samples ** 2).sum(axis=0)
        remaining -= n
    mean = total / draws
    variance = np.maximum(total_sq / draws - mean ** 2, 0.0) * draws / (draws - 1)
    se = np.sqrt(variance / draws)
    gap = np.abs(mean - x.astype(np.float64))
    threshold = max(TOLERANCE_SE, float(stats.norm.isf(UNBIASED_ALPHA / (2 * d))))
    # coordinates quantized exactly must match exactly (up to float32 rounding)
    exact = se == 0.0
    if np.any(gap[exact] > 1e-6 * (1.0 + np.abs(x[exact]))):
        return False, float("inf"), threshold
    z = np.where(exact, 0.0, gap / np.where(exact, 1.0, se))
    max_z = float(z.max()) if d else 0.0
    return max_z <= threshold, max_z, threshold


def _check_sum_bound(
    spec: QuantizerSpec,
    delta: float,
    d: int,
    rng: np.random.Generator,
    tuples: int,
    tuple_size: int,
) -> tuple:
    slacks = np.empty(tuples)
    for j in range(tuples):
        scales = rng.exponential(1.0, size=(tuple_size, 1))
        xs = [as_model_vector(row) for row in rng.standard_normal((tuple_size, d)) * scales]
        qs = [quantize(spec, x, rng)[1].astype(np.float64) for x in xs]
        xs64 = [x.astype(np.float64) for x in xs]
        sum_x = np.sum(xs64, axis=0)
        sum_q = np.sum(qs, axis=0)
        slacks[j] = (
            np.dot(sum_x, sum_x)
            + (1.0 - delta) * sum(np.dot(x, x) for x in xs64)
            - np.dot(sum_q, sum_q)
        )
    mean = float(slacks.mean())
    se = float(slacks.std(ddof=1) / np.sqrt(tuples)) if tuples > 1 else 0.0
    return mean >= -TOLERANCE_SE * se, mean, se


def _check_roundtrip(spec: QuantizerSpec, d: int, rng: np.random.Generator) -> tuple:
    x = rng.standard_normal(d)
    message, reconstruction = quantize(spec, x, rng)
    parsed = QuantizedMessage.from_bytes(message.to_bytes(), keep_fraction=spec.keep_fraction)
    decoded = decode(parsed)
    same_bits = parsed.bits == message.bits
    same_values = np.array_equal(decoded.view(np.uint32), reconstruction.view(np.uint32))
    return bool(same_bits and same_values), message


def verify_contraction(
    spec: QuantizerSpec,
    trials: int,
    d: int,
    rng: np.random.Generator,
    n_gaussian: int = 8,
    unbiased_draws: Optional[int] = None,
    tuples: int = 1000,
    tuple_size: int = 5,
) -> ContractionReport:
    """
    Checks the quantizer contract on one (spec, d).

    Estimates E||x - Q(x)||^2 / ||x||^2 on fresh Gaussian vectors drawn from rng
    and on the adversarial vectors and compares the worst ratio with 1 - delta: exactly for deterministic
    quantizers and within four standard errors for qsgd. Unbiased quantizers
    are also checked for per-coordinate unbiasedness and for the sum bound
    E||sum Q(x_n)||^2 <= ||sum x_n||^2 + (1 - delta) sum ||x_n||^2 over random
    tuples. The serialized round trip and the encoded size are checked for all.

    Args:
        spec (QuantizerSpec): The quantizer under test.
        trials (int): Draws per test vector (qsgd). At least 1000.
        d (int): Vector dimension.
        rng (np.random.Generator): Randomness source.
        n_gaussian (int): Gaussian test vectors drawn from rng.
        unbiased_draws (int, optional): Draws for the unbiasedness test;
            defaults to ten times ``trials``.
        tuples (int): Number of random tuples for the sum bound.
        tuple_size (int): Vectors per tuple.

    Returns:
        ContractionReport: Measured values and pass/fail flags.
    """
    if trials < MIN_TRIALS:
        raise QuantizerError(f"trials must be at least {MIN_TRIALS}. Given {trials}")

    try:
        delta = effective_delta(spec, d).delta
    except QuantizerError as exc:
        logger.warning(str(exc))
        delta = None

    vectors = []
    contraction_passed = delta is not None
    for family, x in check_vectors(d, rng, n_gaussian):
        ratio, se = error_ratio(spec, x, rng, trials)
        vectors.append(VectorRatio(family=family, ratio=ratio, standard_error=se))
        if delta is not None:
            allowed = 1.0 - delta + (TOLERANCE_SE * se if se > 0 else 1e-9)
            contraction_passed = contraction_passed and ratio <= allowed
    max_ratio = max(v.ratio for v in vectors)

    unbiased_passed = max_z = z_threshold = None
    remark_passed = remark_mean = remark_se = None
    if spec.is_unbiased:
        if spec.kind == QuantizerKind.QSGD:
            unbiased_passed, max_z, z_threshold = _check_unbiased(
                spec, d, rng, unbiased_draws or 10 * trials
            )
        if delta is not None:
            remark_passed, remark_mean, remark_se = _check_sum_bound(
                spec, delta, d, rng, tuples, tuple_size
            )
        else:
            remark_passed = False

    roundtrip_passed, message = _check_roundtrip(spec, d, rng)
    expected = expected_size_bits(spec, d)
    size_passed = message.encoded_size_bits == expected and len(message.bits) == (
        expected + 7
    ) // 8

    passed = all(
        flag is not False
        for flag in (
            contraction_passed,
            unbiased_passed,
            remark_passed,
            roundtrip_passed,
            size_passed,
        )
    )
    return ContractionReport(
        quantizer=spec.describe(),
        d=d,
        trials=trials,
        delta=delta,
        max_ratio=max_ratio,
        required_max_ratio=None if delta is None else 1.0 - delta,
        contraction_passed=contraction_passed,
        vectors=vectors,
        unbiased_passed=unbiased_passed,
        max_unbiased_z=max_z,
        unbiased_z_threshold=z_threshold,
        ratio_upper_bound=(
            qsgd_ratio_upper_bound(spec, d) if spec.kind == QuantizerKind.QSGD else None
        ),
        remark_passed=remark_passed,
        remark_mean_slack=remark_mean,
        remark_standard_error=remark_se,
        roundtrip_passed=roundtrip_passed,
        size_passed=size_passed,
        encoded_size_bits=message.encoded_size_bits,
        expected_size_bits=expected,
        passed=passed,
    )
