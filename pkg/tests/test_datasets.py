import numpy as np
import pytest
from sklearn.datasets import dump_svmlight_file
from sklearn.linear_model import LogisticRegression

from errors import DatasetError, DatasetNotFoundError
from objectives.datasets import (
    DatasetCache,
    PartitionKind,
    WeightKind,
    load_libsvm,
    parse_libsvm_lines,
    partition,
    synthesize,
)


def test_libsvm_line_format():
    features, labels = parse_libsvm_lines(["+1 3:1 7:0.5"])
    assert labels.tolist() == [1.0]
    assert features.shape == (1, 7)
    assert features.indices.tolist() == [2, 6]
    assert features.data.tolist() == [1.0, 0.5]


def test_load_libsvm_skips_comments_and_blank_lines(libsvm_file):
    dataset = load_libsvm(libsvm_file)
    assert dataset.num_rows == 3
    assert dataset.num_features == 7
    assert dataset.labels.tolist() == [1.0, -1.0, 1.0]
    assert len(dataset.checksum) == 64


@pytest.mark.parametrize(
    "lines, line_number",
    [
        (["+1 3:1", "-1 3"], 2),
        (["+1 0:1"], 1),
        (["+1 3:1 3:2"], 1),
        (["abc 1:1"], 1),
        (["+1 1:0"], 1),
    ],
)
def test_malformed_lines_report_line_number(lines, line_number):
    with pytest.raises(DatasetError) as info:
        parse_libsvm_lines(lines)
    assert info.value.line_number == line_number


def test_unknown_label_is_rejected():
    with pytest.raises(DatasetError) as info:
        parse_libsvm_lines(["+1 1:1", "7 1:1"])
    assert info.value.line_number == 2


@pytest.mark.parametrize("pair", [(0.0, 1.0), (1.0, 2.0)])
def test_label_pairs_map_to_signs(pair):
    negative, positive = pair
    _, labels = parse_libsvm_lines([f"{positive:g} 1:1", f"{negative:g} 2:1"])
    assert labels.tolist() == [1.0, -1.0]


def test_real_labels_are_kept_when_not_binary():
    _, labels = parse_libsvm_lines(["0.25 1:1", "-3.5 2:1"], binary_labels=False)
    assert labels.tolist() == [0.25, -3.5]


def test_sklearn_written_file_round_trips(tmp_path, rng):
    dense = (rng.random((30, 6)) < 0.5).astype(float)
    dense[:, 0] = 1.0
    labels = np.where(rng.random(30) < 0.5, -1, 1)
    path = tmp_path / "dumped"
    dump_svmlight_file(dense, labels, str(path), zero_based=False)
    dataset = load_libsvm(str(path), n_features=6)
    assert np.array_equal(dataset.features.toarray(), dense)
    assert dataset.labels.tolist() == labels.astype(float).tolist()


def test_missing_file_raises_not_found(tmp_path):
    with pytest.raises(DatasetNotFoundError) as info:
        DatasetCache(str(tmp_path)).load_mushrooms()
    assert info.value.path.endswith("mushrooms")
    assert "Nothing is downloaded" in str(info.value)


def test_cache_records_and_checks_sidecar(tmp_path, libsvm_file):
    cache = DatasetCache(str(tmp_path))
    name = "tiny.libsvm"
    first = cache.load(name)
    assert (tmp_path / f"{name}.sha256").exists()
    assert cache.load(name).checksum == first.checksum
    (tmp_path / name).write_text("+1 1:1\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        cache.load(name)


def test_cache_checks_expected_shape(tmp_path, libsvm_file):
    with pytest.raises(DatasetError):
        DatasetCache(str(tmp_path)).load("tiny.libsvm", expected_shape=(3, 5))


def test_uniform_partition_sizes_and_weights(logistic_data):
    dataset, _ = logistic_data
    shards = partition(dataset, 7, np.random.default_rng(0))
    sizes = [s.size for s in shards]
    assert sum(sizes) == dataset.num_rows
    assert max(sizes) - min(sizes) <= 1
    assert sum(s.weight for s in shards) == pytest.approx(1.0)
    rows = np.concatenate([s.row_indices for s in shards])
    assert sorted(rows.tolist()) == list(range(dataset.num_rows))


def test_uniform_weights(logistic_data):
    dataset, _ = logistic_data
    shards = partition(dataset, 4, np.random.default_rng(0), weights=WeightKind.UNIFORM)
    assert [s.weight for s in shards] == [0.25] * 4


def test_dirichlet_partition_gives_every_client_a_row(logistic_data):
    dataset, _ = logistic_data
    shards = partition(
        dataset, 20, np.random.default_rng(1), kind=PartitionKind.DIRICHLET, dirichlet_alpha=0.05
    )
    assert all(s.size >= 1 for s in shards)
    assert sum(s.size for s in shards) == dataset.num_rows


def test_large_alpha_dirichlet_is_near_equal():
    dataset, _ = synthesize("logistic_l2", 5000, 4, 1, None, np.random.default_rng(2))
    shards = partition(
        dataset, 10, np.random.default_rng(3), kind=PartitionKind.DIRICHLET, dirichlet_alpha=1e6
    )
    sizes = np.array([s.size for s in shards])
    assert np.all(np.abs(sizes - 500) <= 0.02 * 500)


def test_partition_rejects_more_clients_than_rows(logistic_data):
    dataset, _ = logistic_data
    with pytest.raises(DatasetError):
        partition(dataset, dataset.num_rows + 1, np.random.default_rng(0))


def test_synthesize_is_seeded():
    first, _ = synthesize("logistic_l2", 100, 6, 2, None, np.random.default_rng(9))
    second, _ = synthesize("logistic_l2", 100, 6, 2, None, np.random.default_rng(9))
    assert first.checksum == second.checksum
    assert first.name == "synthetic_logistic_l2_100x6"
    assert set(np.unique(first.labels).tolist()) <= {-1.0, 1.0}
    assert np.all(first.features.getnnz(axis=1) >= 1)


def test_synthetic_logistic_rows_are_one_hot_and_separable():
    dataset, _ = synthesize("logistic_l2", 800, 112, 4, None, np.random.default_rng(5))
    dense = dataset.features.toarray()
    assert set(np.unique(dense).tolist()) == {0.0, 1.0}
    # 22 attributes of five or six levels, one level set per attribute
    assert np.all(dataset.features.getnnz(axis=1) == 22)
    assert 0.3 < np.mean(dataset.labels == 1.0) < 0.7
    model = LogisticRegression(C=1e4, fit_intercept=False, max_iter=10_000)
    model.fit(dense, dataset.labels)
    assert model.score(dense, dataset.labels) == 1.0


def test_label_noise_flips_a_fraction_of_labels():
    clean, _ = synthesize("logistic_l2", 4000, 20, 2, None, np.random.default_rng(4))
    noisy, _ = synthesize(
        "logistic_l2", 4000, 20, 2, None, np.random.default_rng(4), label_noise=0.1
    )
    assert (clean.features != noisy.features).nnz == 0
    assert np.mean(clean.labels != noisy.labels) == pytest.approx(0.1, abs=0.02)
    with pytest.raises(DatasetError):
        synthesize("logistic_l2", 10, 5, 1, None, np.random.default_rng(0), label_noise=0.5)


def test_synthetic_quadratic_has_dense_gaussian_rows(quadratic_data):
    dataset, shards = quadratic_data
    assert dataset.num_rows == 120
    assert len(shards) == 3
    assert dataset.name == "synthetic_quadratic_120x5"
