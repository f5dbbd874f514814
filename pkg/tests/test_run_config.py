import numpy as np
import pandas as pd
import pytest

from cli_utils import resolve_config_path
from config import paths
from data_models.metrics_data_model import validate_metrics
from data_models.run_config import (
    RunConfig,
    apply_overrides,
    field_exists,
    flatten_dict,
    load_run_config,
    parse_override,
    parse_run_config,
    serialize_run_config,
    unflatten_dict,
    validate_run_config,
    validate_sweep_axes,
)
from errors import InfeasibleConfigError, SweepAxisError
from sim.simulator import METRICS_COLUMNS


def test_default_config_file_matches_model_defaults():
    config = load_run_config(paths.DEFAULT_RUN_CONFIG_FILE_PATH)
    assert config == RunConfig()
    assert config.protocol.K == 10
    assert config.protocol.eta_l == 2.0
    assert config.T == 500


def test_dotted_and_nested_keys_are_equivalent():
    dotted = validate_run_config({"protocol.K": 5, "data.source": "synthetic", "T": 7})
    nested = validate_run_config({"protocol": {"K": 5}, "data": {"source": "synthetic"}, "T": 7})
    mixed = validate_run_config({"protocol": {"K": 5}, "data.source": "synthetic", "T": 7})
    assert dotted == nested == mixed


def test_flatten_and_unflatten():
    nested = {"a": {"b": 1, "c": {"d": 2}}, "e": 3}
    assert flatten_dict(nested) == {"a.b": 1, "a.c.d": 2, "e": 3}
    assert unflatten_dict(flatten_dict(nested)) == nested


@pytest.mark.parametrize(
    "item, expected",
    [
        ("protocol.K=10", ("protocol.K", 10)),
        ("protocol.eta_l=0.5", ("protocol.eta_l", 0.5)),
        ("data.source=synthetic", ("data.source", "synthetic")),
        ("data.fallback_to_synthetic=true", ("data.fallback_to_synthetic", True)),
        ("data.dirichlet_alpha=null", ("data.dirichlet_alpha", None)),
        (
            'protocol.server_quantizer={"kind": "topk", "keep_fraction": 0.5}',
            ("protocol.server_quantizer", {"kind": "topk", "keep_fraction": 0.5}),
        ),
    ],
)
def test_parse_override(item, expected):
    assert parse_override(item) == expected


def test_malformed_override_is_rejected():
    with pytest.raises(InfeasibleConfigError):
        parse_override("protocol.K")


def test_overrides_replace_values():
    config = apply_overrides(RunConfig(), {"protocol.K": 3, "seed": 4})
    assert config.protocol.K == 3
    assert config.seed == 4
    assert config.protocol.P == 1


def test_unknown_override_key_is_rejected():
    with pytest.raises(InfeasibleConfigError) as info:
        apply_overrides(RunConfig(), {"protocol.buffer": 3})
    assert info.value.report["errors"][0]["loc"] == "protocol.buffer"


def test_replaced_section_drops_stale_fields():
    topk = apply_overrides(
        RunConfig(), {"protocol.server_quantizer": {"kind": "topk", "keep_fraction": 0.5}}
    )
    assert topk.protocol.server_quantizer.keep_fraction == 0.5
    back = apply_overrides(topk, {"protocol.server_quantizer": {"kind": "identity"}})
    assert back.protocol.server_quantizer.keep_fraction is None


def test_serialized_config_parses_back(small_config):
    assert parse_run_config(serialize_run_config(small_config)) == small_config


@pytest.mark.parametrize(
    "overrides",
    [
        {"arrival.pool_size": 200},
        {"objective.kind": "quadratic"},
        {"data.partition": "dirichlet"},
        {"data.source": "libsvm"},
        {"T": 0},
        {"protocol.K": 0},
        {"protocol.server_quantizer": {"kind": "qsgd"}},
        {"delay.scale": -1.0},
        {"arrival.kind": "open_arrival"},
    ],
)
def test_infeasible_configs_are_rejected(overrides):
    with pytest.raises(InfeasibleConfigError) as info:
        apply_overrides(RunConfig(), overrides)
    assert info.value.report["errors"]


def test_field_exists():
    assert field_exists("protocol.server_quantizer.keep_fraction")
    assert field_exists("T")
    assert not field_exists("protocol.T")
    assert not field_exists("T.value")


def test_sweep_axes_are_checked():
    validate_sweep_axes([("protocol.P", [1, 4])])
    with pytest.raises(SweepAxisError):
        validate_sweep_axes([("protocol.Q", [1])])
    with pytest.raises(SweepAxisError):
        validate_sweep_axes([("protocol.P", [])])


def test_missing_config_file(tmp_path, monkeypatch):
    monkeypatch.setattr(paths, "INPUT_CONFIG_DIR", str(tmp_path))
    with pytest.raises(InfeasibleConfigError):
        resolve_config_path("absent.json")
    (tmp_path / "present.json").write_text("{}", encoding="utf-8")
    assert resolve_config_path("present.json") == str(tmp_path / "present.json")


def _metrics(t, uploads):
    n = len(t)
    return pd.DataFrame(
        {
            "t": np.asarray(t, dtype="int64"),
            "sim_time": np.linspace(0.5, 2.0, n),
            "f_minus_fstar": np.linspace(1.0, 0.1, n),
            "grad_norm_sq": np.ones(n),
            "ergodic_grad_norm_sq": np.ones(n),
            "uploads": np.asarray(uploads, dtype="int64"),
            "upload_bytes": np.asarray(uploads, dtype="int64") * 40,
            "download_bytes": np.arange(n, dtype="int64"),
            "max_staleness": np.zeros(n, dtype="int64"),
        },
        columns=METRICS_COLUMNS,
    )


def test_valid_metrics_pass():
    frame = _metrics([1, 2, 3], [2, 4, 6])
    assert validate_metrics(frame, 3).equals(frame)


@pytest.mark.parametrize(
    "frame, T",
    [
        (_metrics([1, 2, 3], [2, 4, 6]), 4),
        (_metrics([1, 3, 2], [2, 4, 6]), 3),
        (_metrics([1, 2, 3], [2, 6, 4]), 3),
        (_metrics([1, 2, 3], [2, 4, 6]).drop(columns=["max_staleness"]), 3),
        (_metrics([], []), 3),
    ],
)
def test_invalid_metrics_fail(frame, T):
    with pytest.raises(ValueError):
        validate_metrics(frame, T)
