import os

import numpy as np
import pytest
import scipy.sparse as sp

from config import paths
from data_models.run_config import RunConfig, apply_overrides
from objectives.datasets import Dataset, DatasetSource, partition, synthesize
from objectives.objectives import ObjectiveSpec
from sim.simulator import prepare_problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def half_norm_sq_data():
    """Quadratic data with zero labels: every client loss is 1/2 ||x||^2."""
    features = sp.csr_matrix(np.ones((6, 1)))
    dataset = Dataset(
        features=features,
        labels=np.zeros(6),
        source=DatasetSource.SYNTHETIC,
        name="zeros_6x1",
    )
    shards = partition(dataset, 1, np.random.default_rng(0))
    return dataset, shards


@pytest.fixture
def half_norm_sq_spec():
    return ObjectiveSpec(kind="quadratic", l2_strength=0.0)


@pytest.fixture
def logistic_data():
    """Small synthetic logistic dataset split over four clients."""
    return synthesize("logistic_l2", 200, 8, 4, None, np.random.default_rng(7))


@pytest.fixture
def quadratic_data():
    return synthesize("quadratic", 120, 5, 3, None, np.random.default_rng(3))


@pytest.fixture
def small_config():
    """A fast synthetic logistic run: 10 clients, K=2, 20 server steps."""
    return apply_overrides(
        RunConfig(),
        {
            "data.source": "synthetic",
            "data.synthetic_rows": 400,
            "data.synthetic_features": 10,
            "data.n_clients": 10,
            "arrival.pool_size": 10,
            "protocol.K": 2,
            "protocol.P": 2,
            "protocol.eta_l": 0.5,
            "protocol.eta_g": 1.0,
            "protocol.batch_size": 4,
            "T": 20,
            "metrics.every": 1,
        },
    )


@pytest.fixture
def small_problem(small_config):
    return prepare_problem(small_config)


@pytest.fixture
def quadratic_config():
    return apply_overrides(
        RunConfig(),
        {
            "objective.kind": "quadratic",
            "data.source": "synthetic",
            "data.synthetic_rows": 120,
            "data.synthetic_features": 5,
            "data.n_clients": 6,
            "arrival.pool_size": 6,
            "protocol.K": 2,
            "protocol.P": 2,
            "protocol.eta_l": 0.05,
            "protocol.eta_g": 1.0,
            "protocol.batch_size": 1,
            "T": 30,
        },
    )


@pytest.fixture
def error_dir(tmp_path, monkeypatch):
    """Redirects every script error file into a temporary directory."""
    errors = tmp_path / "errors"
    monkeypatch.setattr(paths, "ERRORS_DIR", str(errors))
    for name in ("RUN", "SWEEP", "VERIFY", "CONSTANTS", "SUGGEST"):
        file_name = f"{name.lower()}_error.txt"
        monkeypatch.setattr(paths, f"{name}_ERROR_FILE_PATH", os.path.join(errors, file_name))
    return errors


@pytest.fixture
def libsvm_file(tmp_path):
    path = tmp_path / "tiny.libsvm"
    path.write_text("+1 3:1 7:0.5\n-1 1:1\n# comment line\n\n+1 2:2 3:-1\n", encoding="utf-8")
    return str(path)
