import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DatasetError, DatasetNotFoundError
from logger import get_logger

logger = get_logger(task_name="datasets")

MUSHROOMS_SHAPE = (8124, 112)
# mushrooms-like fallback: one-hot categorical attributes of about five levels each
SYNTHETIC_LEVELS = 5
# fraction of drawn rows closest to the planted boundary that is discarded
SYNTHETIC_MARGIN_DROP = 0.25
# Label pairs accepted in LIBSVM files, mapped onto (-1, +1) in this order.
LABEL_PAIRS = ((-1.0, 1.0), (0.0, 1.0), (1.0, 2.0))


class DatasetSource(str, Enum):
    """Enum for where a dataset came from"""

    LIBSVM_FILE = "libsvm_file"
    SYNTHETIC = "synthetic"


class PartitionKind(str, Enum):
    """Enum for how rows are split across clients"""

    UNIFORM = "uniform"
    DIRICHLET = "dirichlet"


class WeightKind(str, Enum):
    """Enum for client weights w_n"""

    SIZE = "size"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class Dataset:
    """Sparse features (m x d CSR) with labels and a content checksum."""

    features: sp.csr_matrix
    labels: np.ndarray
    source: DatasetSource
    name: str = ""
    checksum: str = ""

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows"
            )
        empty = np.flatnonzero(self.features.getnnz(axis=1) == 0)
        if empty.size:
            raise DatasetError(f"row {int(empty[0]) + 1} has no nonzero feature")
        if not self.checksum:
            object.__setattr__(self, "checksum", array_checksum(self.features, self.labels))

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClientShard:
    """
    Rows held by one client. ``features`` and ``labels`` are the materialized
    slices of the parent dataset, kept so gradient calls do not re-index it.
    """

    client_id: int
    row_indices: np.ndarray
    weight: float
    features: sp.csr_matrix = field(repr=False, compare=False)
    labels: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return int(self.row_indices.shape[0])


def array_checksum(features: sp.csr_matrix, labels: np.ndarray) -> str:
    """sha256 over the CSR arrays and labels."""
    digest = hashlib.sha256()
    csr = features.tocsr()
    for array in (csr.indptr, csr.indices, csr.data, labels):
        digest.update(np.ascontiguousarray(array).tobytes())
    digest.update(str(csr.shape).encode())
    return digest.hexdigest()


def file_checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def shards_checksum(shards: Sequence[ClientShard]) -> str:
    digest = hashlib.sha256()
    for shard in shards:
        digest.update(np.int64(shard.client_id).tobytes())
        digest.update(np.ascontiguousarray(shard.row_indices, dtype=np.int64).tobytes())
        digest.update(np.float64(shard.weight).tobytes())
    return digest.hexdigest()


def _map_labels(raw: np.ndarray, line_numbers: List[int]) -> np.ndarray:
    values = set(np.unique(raw).tolist())
    for negative, positive in LABEL_PAIRS:
        if values <= {negative, positive}:
            return np.where(raw == positive, 1.0, -1.0)
    allowed = {v for pair in LABEL_PAIRS for v in pair}
    for label, line_number in zip(raw, line_numbers):
        if label not in allowed:
            raise DatasetError(f"unknown label {label:g}", line_number)
    raise DatasetError(f"labels {sorted(values)} cannot be mapped onto -1/+1")


def parse_libsvm_lines(
    lines, n_features: Optional[int] = None, binary_labels: bool = True
) -> Tuple[sp.csr_matrix, np.ndarray]:
    """
    Parses LIBSVM text lines ``label idx:val idx:val ...``.

    Indices are 1-based. Blank lines and lines starting with ``#`` are skipped,
    and anything after a ``#`` is a comment.

    Args:
        lines (Iterable[str]): The file content.
        n_features (int, optional): Number of columns; inferred when omitted.
        binary_labels (bool): Map labels onto -1/+1 (logistic) or keep reals.

    Returns:
        Tuple[sp.csr_matrix, np.ndarray]: Features and labels.

    Raises:
        DatasetError: On a malformed line, a duplicate or out-of-range index,
            a row without nonzeros or an unknown label.
    """
    labels, line_numbers = [], []
    indptr, indices, data = [0], [], []
    for line_number, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        tokens = content.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise DatasetError(f"invalid label '{tokens[0]}'", line_number) from None
        seen = set()
        for token in tokens[1:]:
            index_text, sep, value_text = token.partition(":")
            try:
                if not sep:
                    raise ValueError
                index = int(index_text)
                value = float(value_text)
            except ValueError:
                raise DatasetError(f"malformed feature '{token}'", line_number) from None
            if index < 1:
                raise DatasetError(f"feature index {index} is not 1-based", line_number)
            if n_features is not None and index > n_features:
                raise DatasetError(
                    f"feature index {index} exceeds {n_features} features", line_number
                )
            if index in seen:
                raise DatasetError(f"duplicate feature index {index}", line_number)
            if not np.isfinite(value):
                raise DatasetError(f"non-finite value in '{token}'", line_number)
            seen.add(index)
            if value != 0.0:
                indices.append(index - 1)
                data.append(value)
        if len(indices) == indptr[-1]:
            raise DatasetError("row has no nonzero feature", line_number)
        indptr.append(len(indices))
        labels.append(label)
        line_numbers.append(line_number)

    if not labels:
        raise DatasetError("no data rows found")
    d = n_features if n_features is not None else max(indices) + 1
    features = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices), np.asarray(indptr)),
        shape=(len(labels), d),
    )
    features.sort_indices()
    raw = np.asarray(labels, dtype=np.float64)
    return features, (_map_labels(raw, line_numbers) if binary_labels else raw)


def load_libsvm(
    path: str, n_features: Optional[int] = None, binary_labels: bool = True
) -> Dataset:
    """
    Loads a LIBSVM-format file.

    Args:
        path (str): File path.
        n_features (int, optional): Number of columns; inferred when omitted.
        binary_labels (bool): Map labels onto -1/+1.

    Returns:
        Dataset: The parsed dataset, checksum taken over the file bytes.
    """
    if not os.path.isfile(path):
        raise DatasetNotFoundError(path)
    with open(path, "r", encoding="utf-8") as file:
        features, labels = parse_libsvm_lines(file, n_features, binary_labels)
    return Dataset(
        features=features,
        labels=labels,
        source=DatasetSource.LIBSVM_FILE,
        name=os.path.basename(path),
        checksum=file_checksum(path),
    )


def partition(
    dataset: Dataset,
    n_clients: int,
    rng: np.random.Generator,
    kind: PartitionKind = PartitionKind.UNIFORM,
    dirichlet_alpha: Optional[float] = None,
    weights: WeightKind = WeightKind.SIZE,
) -> List[ClientShard]:
    """
    Splits the dataset rows across clients.

    Uniform gives a random split with sizes differing by at most one row.
    Dirichlet draws size proportions from a symmetric Dirichlet(alpha) and
    gives every client at least one row.

    Args:
        dataset (Dataset): The data to split.
        n_clients (int): Number of clients N.
        rng (np.random.Generator): Partition stream.
        kind (PartitionKind): Split rule.
        dirichlet_alpha (float, optional): Concentration; required for dirichlet.
        weights (WeightKind): size-proportional (m_n / m) or uniform (1 / N).

    Returns:
        List[ClientShard]: One shard per client, ids 0..N-1.
    """
    m = dataset.num_rows
    if n_clients < 1:
        raise DatasetError(f"n_clients must be positive. Given {n_clients}")
    if n_clients > m:
        raise DatasetError(f"cannot split {m} rows across {n_clients} clients")

    permutation = rng.permutation(m)
    if PartitionKind(kind) == PartitionKind.DIRICHLET:
        if dirichlet_alpha is None or dirichlet_alpha <= 0:
            raise DatasetError(f"dirichlet partition needs alpha > 0. Given {dirichlet_alpha}")
        proportions = rng.dirichlet(np.full(n_clients, float(dirichlet_alpha)))
        spare = m - n_clients
        raw = proportions * spare
        sizes = np.floor(raw).astype(np.int64)
        # largest remainders take the leftover rows, lower client id first on ties
        order = np.lexsort((np.arange(n_clients), -(raw - sizes)))
        sizes[order[: spare - int(sizes.sum())]] += 1
        sizes += 1
        pieces = np.split(permutation, np.cumsum(sizes)[:-1])
    else:
        pieces = np.array_split(permutation, n_clients)

    shards = []
    for client_id, rows in enumerate(pieces):
        rows = np.sort(rows)
        weight = rows.size / m if WeightKind(weights) == WeightKind.SIZE else 1.0 / n_clients
        shards.append(
            ClientShard(
                client_id=client_id,
                row_indices=rows,
                weight=weight,
                features=dataset.features[rows],
                labels=dataset.labels[rows],
            )
        )
    return shards


def _categorical_rows(
    m: int, d: int, rng: np.random.Generator
) -> Tuple[sp.csr_matrix, np.ndarray]:
    attributes = np.array_split(np.arange(d), max(1, d // SYNTHETIC_LEVELS))
    drawn = int(np.ceil(m / (1.0 - SYNTHETIC_MARGIN_DROP))) + 1
    columns = np.stack(
        [levels[rng.integers(0, levels.size, size=drawn)] for levels in attributes], axis=1
    )
    w_true = rng.standard_normal(d)
    score = w_true[columns].sum(axis=1)
    score -= np.median(score)
    # the m rows farthest from the boundary, in draw order
    kept = np.sort(np.argsort(-np.abs(score), kind="stable")[:m])
    columns, score = columns[kept], score[kept]
    n_attributes = columns.shape[1]
    features = sp.csr_matrix(
        (
            np.ones(m * n_attributes),
            columns.ravel(),
            np.arange(0, m * n_attributes + 1, n_attributes),
        ),
        shape=(m, d),
    )
    labels = np.where(score >= 0.0, 1.0, -1.0)
    return features, labels


def synthesize(
    kind: str,
    m: int,
    d: int,
    n_clients: int,
    dirichlet_alpha: Optional[float],
    rng: np.random.Generator,
    partition_rng: Optional[np.random.Generator] = None,
    weights: WeightKind = WeightKind.SIZE,
    label_noise: float = 0.0,
) -> Tuple[Dataset, List[ClientShard]]:
    """
    Generates a dataset and its client shards.

    ``logistic_l2`` data mimics mushrooms: every row one-hot encodes one
    level per categorical attribute, and labels are the sign of a planted
    linear score. Rows nearest the planted boundary are discarded, so the
    classes are separable with a margin.
    ``quadratic`` data has Gaussian rows and Gaussian real labels.

    Args:
        kind (str): Objective kind the data is meant for.
        m (int): Number of rows.
        d (int): Number of features.
        n_clients (int): Number of shards.
        dirichlet_alpha (float, optional): Dirichlet concentration; uniform
            split when None.
        rng (np.random.Generator): Data stream.
        partition_rng (np.random.Generator, optional): Partition stream;
            defaults to ``rng``.
        weights (WeightKind): Client weighting.
        label_noise (float): Fraction of logistic labels flipped after the
            margin is applied.

    Returns:
        Tuple[Dataset, List[ClientShard]]
    """
    if m < 1 or d < 1:
        raise DatasetError(f"synthetic data needs m, d >= 1. Given m={m}, d={d}")
    if not 0.0 <= label_noise < 0.5:
        raise DatasetError(f"label_noise must lie in [0, 0.5). Given {label_noise}")
    if kind == "quadratic":
        features = sp.csr_matrix(rng.standard_normal((m, d)))
        labels = rng.standard_normal(m)
    else:
        features, labels = _categorical_rows(m, d, rng)
        if label_noise > 0.0:
            flips = rng.random(m) < label_noise
            labels[flips] = -labels[flips]

    dataset = Dataset(
        features=features,
        labels=labels,
        source=DatasetSource.SYNTHETIC,
        name=f"synthetic_{kind}_{m}x{d}",
    )
    plan = PartitionKind.UNIFORM if dirichlet_alpha is None else PartitionKind.DIRICHLET
    shards = partition(
        dataset,
        n_clients,
        partition_rng if partition_rng is not None else rng,
        kind=plan,
        dirichlet_alpha=dirichlet_alpha,
        weights=weights,
    )
    return dataset, shards


class DatasetCache:
    """
    Dataset files under one directory with sha256 sidecars.

    The first successful load writes ``<name>.sha256``; later loads must match
    it. Files are never downloaded.
    """

    def __init__(self, dataset_dir: str) -> None:
        self.dataset_dir = dataset_dir

    def path_for(self, name: str) -> str:
        return os.path.join(self.dataset_dir, name)

    def load(
        self,
        name: str,
        expected_shape: Optional[Tuple[int, int]] = None,
        binary_labels: bool = True,
    ) -> Dataset:
        path = self.path_for(name)
        if not os.path.isfile(path):
            raise DatasetNotFoundError(
                path,
                hint=(
                    f"Download the LIBSVM file '{name}' manually and place it at this path "
                    "(or pass --dataset-dir). Nothing is downloaded automatically."
                ),
            )
        checksum = file_checksum(path)
        sidecar = f"{path}.sha256"
        if os.path.isfile(sidecar):
            with open(sidecar, "r", encoding="utf-8") as file:
                recorded = file.read().split()[0]
            if recorded != checksum:
                raise DatasetError(
                    f"checksum mismatch for '{path}': recorded {recorded}, found {checksum}"
                )
        n_features = expected_shape[1] if expected_shape else None
        dataset = load_libsvm(path, n_features=n_features, binary_labels=binary_labels)
        if expected_shape is not None and dataset.features.shape != tuple(expected_shape):
            raise DatasetError(
                f"'{path}' has shape {dataset.features.shape}, expected {tuple(expected_shape)}"
            )
        if not os.path.isfile(sidecar):
            with open(sidecar, "w", encoding="utf-8") as file:
                file.write(f"{checksum}  {name}\n")
            logger.info(f"Recorded checksum of '{name}' in {sidecar}")
        return dataset

    def load_mushrooms(self, name: str = "mushrooms") -> Dataset:
        return self.load(name, expected_shape=MUSHROOMS_SHAPE)
