"""Identity, QSGD and top-k quantizers with exact wire accounting.

Every quantizer is an encoder/decoder pair. ``quantize`` encodes a vector into
a ``QuantizedMessage`` (all randomness is consumed here) and returns the
decoded reconstruction alongside it; ``decode`` is a pure function of the
message bits.

Wire layout (bits are packed least-significant bit first, bytes little-endian):

- identity: d float32 words.
- qsgd: header = 32-bit float32 scale (max-norm or L2 norm), payload = d fields
  of ``bits_per_coord`` bits holding ``level + s`` with
  ``s = 2 ** (bits_per_coord - 1) - 1`` and ``level`` in ``[-s, s]``.
- topk: header = k indices of ``ceil(log2 d)`` bits each (ascending),
  payload = k float32 words, one per index.

``to_bytes`` prefixes a small preamble (kind, d, k, bits, norm) that frames the
message; it is not part of ``encoded_size_bits``.
"""
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError, root_validator, validator

from errors import QuantizerError

MODEL_DTYPE = np.float32
FLOAT_BITS = 32
MIN_QSGD_BITS = 2
MAX_QSGD_BITS = 16
# Guards ceil(keep_fraction * d) against float noise such as 0.07 * 100.
_KEEP_EPS = 1e-9

_PREAMBLE = struct.Struct("<BIIBB")


class QuantizerKind(str, Enum):
    """Enum for the supported quantizers"""

    IDENTITY = "identity"
    QSGD = "qsgd"
    TOPK = "topk"


class NormKind(str, Enum):
    """Enum for the scale transmitted by QSGD"""

    LINF = "linf"
    L2 = "l2"


_KIND_CODES = {QuantizerKind.IDENTITY: 0, QuantizerKind.QSGD: 1, QuantizerKind.TOPK: 2}
_NORM_CODES = {NormKind.LINF: 0, NormKind.L2: 1}
_KIND_BY_CODE = {code: kind for kind, code in _KIND_CODES.items()}
_NORM_BY_CODE = {code: norm for norm, code in _NORM_CODES.items()}


class QuantizerSpec(BaseModel):
    """
    A model describing one quantizer. ``bits_per_coord`` and ``norm`` apply to
    qsgd only, ``keep_fraction`` to topk only.
    """

    kind: QuantizerKind = QuantizerKind.IDENTITY
    bits_per_coord: Optional[int] = None
    keep_fraction: Optional[float] = None
    norm: NormKind = NormKind.LINF

    class Config:
        frozen = True
        extra = "forbid"

    @validator("bits_per_coord", allow_reuse=True)
    def valid_bits(cls, v):
        if v is not None and not MIN_QSGD_BITS <= v <= MAX_QSGD_BITS:
            raise ValueError(
                f"bits_per_coord must be in [{MIN_QSGD_BITS}, {MAX_QSGD_BITS}]. Given {v}"
            )
        return v

    @validator("keep_fraction", allow_reuse=True)
    def valid_keep_fraction(cls, v):
        if v is not None and not 0.0 < v <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1]. Given {v}")
        return v

    @root_validator(skip_on_failure=True, allow_reuse=True)
    def fields_match_kind(cls, values):
        kind = values.get("kind")
        bits = values.get("bits_per_coord")
        keep = values.get("keep_fraction")
        if kind == QuantizerKind.QSGD and bits is None:
            raise ValueError("qsgd quantizer requires bits_per_coord")
        if kind == QuantizerKind.TOPK and keep is None:
            raise ValueError("topk quantizer requires keep_fraction")
        if kind != QuantizerKind.QSGD and bits is not None:
            raise ValueError(f"bits_per_coord is only valid for qsgd, not {kind.value}")
        if kind != QuantizerKind.TOPK and keep is not None:
            raise ValueError(f"keep_fraction is only valid for topk, not {kind.value}")
        return values

    @property
    def is_lossless(self) -> bool:
        return self.kind == QuantizerKind.IDENTITY or (
            self.kind == QuantizerKind.TOPK and self.keep_fraction == 1.0
        )

    @property
    def is_unbiased(self) -> bool:
        return self.kind in (QuantizerKind.IDENTITY, QuantizerKind.QSGD) or self.is_lossless

    @property
    def levels(self) -> int:
        """Number of positive QSGD levels ``s``."""
        if self.kind != QuantizerKind.QSGD:
            raise QuantizerError("levels is only defined for qsgd")
        return 2 ** (self.bits_per_coord - 1) - 1

    def num_kept(self, d: int) -> int:
        """Number of coordinates ``k = ceil(keep_fraction * d)`` sent by topk."""
        if self.kind != QuantizerKind.TOPK:
            return d
        return max(int(math.ceil(self.keep_fraction * d - _KEEP_EPS)), 0)

    def describe(self) -> str:
        if self.kind == QuantizerKind.QSGD:
            return f"qsgd-{self.bits_per_coord}bit-{self.norm.value}"
        if self.kind == QuantizerKind.TOPK:
            return f"top{self.keep_fraction:g}"
        return "identity"


IDENTITY = QuantizerSpec()


def index_bits(d: int) -> int:
    """Bits needed for one top-k index, ``ceil(log2 d)``."""
    return int(math.ceil(math.log2(d))) if d > 1 else 0


def expected_size_bits(spec: QuantizerSpec, d: int) -> int:
    """Closed-form encoded size of a d-dimensional vector."""
    if spec.kind == QuantizerKind.QSGD:
        return FLOAT_BITS + d * spec.bits_per_coord
    if spec.kind == QuantizerKind.TOPK:
        return spec.num_kept(d) * (index_bits(d) + FLOAT_BITS)
    return FLOAT_BITS * d


@dataclass(frozen=True)
class QuantizedMessage:
    """An encoded vector: spec, dimension and the packed header+payload bits."""

    spec: QuantizerSpec
    dimension: int
    bits: bytes
    encoded_size_bits: int

    @property
    def num_bytes(self) -> int:
        """Packed length in whole bytes, the unit summed by byte counters."""
        return (self.encoded_size_bits + 7) // 8

    def to_bytes(self) -> bytes:
        spec = self.spec
        preamble = _PREAMBLE.pack(
            _KIND_CODES[spec.kind],
            self.dimension,
            spec.num_kept(self.dimension) if spec.kind == QuantizerKind.TOPK else 0,
            spec.bits_per_coord or 0,
            _NORM_CODES[spec.norm],
        )
        return preamble + self.bits

    @classmethod
    def from_bytes(cls, data: bytes, keep_fraction: Optional[float] = None) -> "QuantizedMessage":
        """
        Parses a serialized message.

        Args:
            data (bytes): Output of ``to_bytes``.
            keep_fraction (float, optional): The sender's top-k fraction. The
                wire carries k, so this only restores the spec field; when
                omitted it is recovered as ``k / d``.
        """
        if len(data) < _PREAMBLE.size:
            raise QuantizerError("Truncated message preamble")
        kind_code, d, k, bits, norm_code = _PREAMBLE.unpack_from(data)
        kind = _KIND_BY_CODE.get(kind_code)
        norm = _NORM_BY_CODE.get(norm_code)
        if kind is None or norm is None:
            raise QuantizerError(f"Unknown quantizer code {kind_code} or norm code {norm_code}")
        try:
            if kind == QuantizerKind.QSGD:
                spec = QuantizerSpec(kind=kind, bits_per_coord=bits, norm=norm)
            elif kind == QuantizerKind.TOPK:
                spec = QuantizerSpec(kind=kind, keep_fraction=keep_fraction or k / max(d, 1))
            else:
                spec = IDENTITY
        except ValidationError as exc:
            raise QuantizerError(f"Invalid quantizer in message preamble: {exc}") from exc
        if kind == QuantizerKind.TOPK and spec.num_kept(d) != k:
            raise QuantizerError(f"keep_fraction {keep_fraction} does not give k={k}")
        size = expected_size_bits(spec, d)
        payload = data[_PREAMBLE.size:]
        if len(payload) != (size + 7) // 8:
            raise QuantizerError(
                f"Payload holds {len(payload)} bytes, expected {(size + 7) // 8}"
            )
        return cls(spec=spec, dimension=d, bits=payload, encoded_size_bits=size)


def _uint_fields_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    values = values.astype(np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    return ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)


def _bits_to_uint_fields(bits: np.ndarray, width: int, count: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.uint64)
    weights = np.uint64(1) << np.arange(width, dtype=np.uint64)
    fields = bits[: width * count].reshape(count, width).astype(np.uint64)
    return (fields * weights).sum(axis=1, dtype=np.uint64)


def _float32_to_bits(values: np.ndarray) -> np.ndarray:
    return _uint_fields_to_bits(values.astype(MODEL_DTYPE).view(np.uint32), FLOAT_BITS)


def _bits_to_float32(bits: np.ndarray, count: int) -> np.ndarray:
    words = _bits_to_uint_fields(bits, FLOAT_BITS, count).astype(np.uint32)
    return words.view(MODEL_DTYPE)


def _pack(bit_array: np.ndarray) -> bytes:
    return np.packbits(bit_array, bitorder="little").tobytes()


def _unpack(data: bytes, n_bits: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n_bits]


def as_model_vector(x) -> np.ndarray:
    """Validates a vector and casts it to the float32 wire precision."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise QuantizerError(f"Expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise QuantizerError("Input vector has non-finite entries")
    x32 = x.astype(MODEL_DTYPE)
    if not np.all(np.isfinite(x32)):
        raise QuantizerError("Input vector overflows float32")
    return x32


def qsgd_scale(spec: QuantizerSpec, x32: np.ndarray) -> np.float32:
    """
    The transmitted scale: max-norm or L2 norm of x, rounded up to float32 so
    that every level ratio stays within [0, s].
    """
    x64 = x32.astype(np.float64)
    norm = float(np.max(np.abs(x64))) if spec.norm == NormKind.LINF else float(
        np.sqrt(np.dot(x64, x64))
    )
    scale = MODEL_DTYPE(norm)
    if float(scale) < norm:
        scale = np.nextafter(scale, MODEL_DTYPE(np.inf))
    return scale


def qsgd_levels(
    spec: QuantizerSpec,
    x32: np.ndarray,
    scale: np.float32,
    rng: np.random.Generator,
    n_draws: Optional[int] = None,
) -> np.ndarray:
    """
    Stochastic rounding of ``s * |x_i| / scale`` to adjacent integer levels.

    Returns signed levels of shape (d,), or (n_draws, d) when ``n_draws`` is set.
    """
    s = spec.levels
    shape = x32.shape if n_draws is None else (n_draws,) + x32.shape
    uniforms = rng.random(shape)
    if float(scale) == 0.0:
        return np.zeros(shape, dtype=np.int64)
    ratio = s * np.abs(x32.astype(np.float64)) / float(scale)
    lower = np.floor(ratio)
    level = lower + (uniforms < (ratio - lower))
    level = np.minimum(level, s).astype(np.int64)
    return np.sign(x32).astype(np.int64) * level


def qsgd_reconstruct(spec: QuantizerSpec, levels: np.ndarray, scale: np.float32) -> np.ndarray:
    return (levels.astype(np.float64) * (float(scale) / spec.levels)).astype(MODEL_DTYPE)


def _topk_indices(x32: np.ndarray, k: int) -> np.ndarray:
    d = x32.shape[0]
    # primary key: magnitude descending; ties broken by lower index first
    order = np.lexsort((np.arange(d), -np.abs(x32.astype(np.float64))))
    return np.sort(order[:k])


def quantize(
    spec: QuantizerSpec, x, rng: Optional[np.random.Generator] = None
) -> Tuple[QuantizedMessage, np.ndarray]:
    """
    Encodes x and returns the message together with its reconstruction Q(x).

    Args:
        spec (QuantizerSpec): The quantizer to apply.
        x (array-like): A finite 1-D vector.
        rng (np.random.Generator): Randomness source; required for qsgd.

    Returns:
        Tuple[QuantizedMessage, np.ndarray]: The message and ``decode(message)``.

    Raises:
        QuantizerError: On non-finite input or an unusable top-k size.
    """
    x32 = as_model_vector(x)
    d = x32.shape[0]

    if spec.kind == QuantizerKind.IDENTITY:
        bit_array = _float32_to_bits(x32)

    elif spec.kind == QuantizerKind.QSGD:
        if rng is None:
            raise QuantizerError("qsgd requires a random generator")
        scale = qsgd_scale(spec, x32)
        levels = qsgd_levels(spec, x32, scale, rng)
        bit_array = np.concatenate(
            [
                _float32_to_bits(np.array([scale], dtype=MODEL_DTYPE)),
                _uint_fields_to_bits(levels + spec.levels, spec.bits_per_coord),
            ]
        )

    else:
        k = spec.num_kept(d)
        if k < 1:
            raise QuantizerError(f"topk keeps no coordinate of a {d}-dimensional vector")
        if k > d:
            raise QuantizerError(f"topk k={k} exceeds dimension d={d}")
        indices = _topk_indices(x32, k)
        bit_array = np.concatenate(
            [
                _uint_fields_to_bits(indices, index_bits(d)),
                _float32_to_bits(x32[indices]),
            ]
        )

    size = expected_size_bits(spec, d)
    message = QuantizedMessage(
        spec=spec, dimension=d, bits=_pack(bit_array), encoded_size_bits=size
    )
    return message, decode(message)


def decode(message: QuantizedMessage) -> np.ndarray:
    """
    Reconstructs the vector carried by a message. Deterministic in the bits.

    Args:
        message (QuantizedMessage): An encoded vector.

    Returns:
        np.ndarray: The float32 reconstruction; unsent top-k coordinates are zero.
    """
    spec = message.spec
    d = message.dimension
    bit_array = _unpack(message.bits, message.encoded_size_bits)

    if spec.kind == QuantizerKind.IDENTITY:
        return _bits_to_float32(bit_array, d).copy()

    if spec.kind == QuantizerKind.QSGD:
        scale = _bits_to_float32(bit_array[:FLOAT_BITS], 1)[0]
        fields = _bits_to_uint_fields(bit_array[FLOAT_BITS:], spec.bits_per_coord, d)
        levels = fields.astype(np.int64) - spec.levels
        return qsgd_reconstruct(spec, levels, scale)

    k = spec.num_kept(d)
    width = index_bits(d)
    indices = _bits_to_uint_fields(bit_array[: k * width], width, k).astype(np.int64)
    values = _bits_to_float32(bit_array[k * width:], k)
    out = np.zeros(d, dtype=MODEL_DTYPE)
    out[indices] = values
    return out


def sample_reconstructions(
    spec: QuantizerSpec, x, rng: np.random.Generator, n: int
) -> np.ndarray:
    """
    Draws n independent reconstructions Q(x) as an (n, d) array, using the
    same arithmetic as ``quantize`` without building messages.
    """
    x32 = as_model_vector(x)
    if spec.kind == QuantizerKind.QSGD:
        scale = qsgd_scale(spec, x32)
        levels = qsgd_levels(spec, x32, scale, rng, n_draws=n)
        return qsgd_reconstruct(spec, levels, scale)
    _, reconstruction = quantize(spec, x32, rng)
    return np.tile(reconstruction, (n, 1))
