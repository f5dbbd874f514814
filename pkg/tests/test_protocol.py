import dataclasses

import numpy as np
import pytest
from pydantic import ValidationError

from errors import ProtocolError
from objectives.objectives import ObjectiveSpec
from protocol.protocol import (
    BroadcastLog,
    ProtocolConfig,
    ProtocolMode,
    client_apply_broadcast,
    client_background_apply,
    client_train,
    initial_client_state,
    initial_server_state,
    server_global_update,
    server_receive,
    staleness_weight,
    start_training_run,
)
from quantizers.quantizers import IDENTITY, QuantizerSpec, decode, quantize

TOP_HALF = QuantizerSpec(kind="topk", keep_fraction=0.5)


def _upload(vector):
    message, _ = quantize(IDENTITY, np.asarray(vector, dtype=np.float64))
    return message


def _filled_state(x0, deltas, config, mode=ProtocolMode.QAFEL):
    state = initial_server_state(x0, mode)
    for client_id, delta in enumerate(deltas):
        state = server_receive(state, _upload(delta), 0, config, client_id)
    return state


@pytest.mark.parametrize("P, expected", [(1, 1.0), (2, 1.5)])
def test_local_training_delta(half_norm_sq_data, half_norm_sq_spec, rng, P, expected):
    _, shards = half_norm_sq_data
    config = ProtocolConfig(K=1, P=P, eta_l=0.5, batch_size=2)
    run = start_training_run(initial_client_state(0, [2.0]))
    message, finished = client_train(run, shards[0], half_norm_sq_spec, 0.0, config, rng)
    assert decode(message).tolist() == [expected]
    assert finished.p == P
    assert finished.y.tolist() == [2.0 - expected]


def test_finished_run_cannot_train_again(half_norm_sq_data, half_norm_sq_spec, rng):
    _, shards = half_norm_sq_data
    config = ProtocolConfig(K=1, P=1, eta_l=0.5)
    run = start_training_run(initial_client_state(0, [2.0]))
    _, finished = client_train(run, shards[0], half_norm_sq_spec, 0.0, config, rng)
    with pytest.raises(ProtocolError):
        client_train(finished, shards[0], half_norm_sq_spec, 0.0, config, rng)


def test_unquantized_mode_uploads_exactly(logistic_data, rng):
    _, shards = logistic_data
    config = ProtocolConfig(
        K=1, P=3, eta_l=0.1, batch_size=4, client_quantizer=TOP_HALF,
        mode=ProtocolMode.UNQUANTIZED,
    )
    run = start_training_run(initial_client_state(0, np.zeros(8)))
    message, finished = client_train(
        run, shards[0], ObjectiveSpec(kind="logistic_l2"), 0.01, config, rng
    )
    assert message.spec == IDENTITY
    assert np.array_equal(decode(message), finished.y0 - finished.y)


def test_staleness_weight():
    assert staleness_weight(0) == 1.0
    assert staleness_weight(3) == 0.5


def test_receive_scales_stale_updates():
    config = ProtocolConfig(K=2, staleness_scaling=True)
    state = server_receive(initial_server_state(np.zeros(2)), _upload([2.0, 0.0]), 3, config, 7)
    assert state.k_filled == 1
    assert state.buffer[0].delta.tolist() == [1.0, 0.0]
    assert state.buffer[0].client_id == 7
    assert state.buffer[0].staleness == 3
    assert state.x.tolist() == [0.0, 0.0]


def test_receive_without_scaling_keeps_delta():
    config = ProtocolConfig(K=2)
    state = server_receive(initial_server_state(np.zeros(2)), _upload([2.0, 0.0]), 3, config)
    assert state.buffer[0].delta.tolist() == [2.0, 0.0]


def test_receive_rejects_overflow_and_negative_staleness():
    config = ProtocolConfig(K=1)
    state = initial_server_state(np.zeros(2))
    with pytest.raises(ProtocolError):
        server_receive(state, _upload([1.0, 1.0]), -1, config)
    full = server_receive(state, _upload([1.0, 1.0]), 0, config)
    with pytest.raises(ProtocolError):
        server_receive(full, _upload([1.0, 1.0]), 0, config)


def test_global_update_descends_on_mean_delta():
    config = ProtocolConfig(K=2, eta_g=0.1)
    state = _filled_state(np.zeros(2), [[2.0, 0.0], [0.0, 2.0]], config)
    updated, message = server_global_update(state, config)
    step = -np.float32(0.1)
    assert updated.x.tolist() == [step, step]
    assert updated.t == 1
    assert updated.k_filled == 0
    assert updated.x.dtype == np.float32


def test_global_update_needs_full_buffer():
    config = ProtocolConfig(K=2)
    state = _filled_state(np.zeros(2), [[1.0, 1.0]], config)
    with pytest.raises(ProtocolError):
        server_global_update(state, config)


def test_qafel_broadcasts_quantized_hidden_state_difference():
    config = ProtocolConfig(K=1, eta_g=1.0, server_quantizer=TOP_HALF)
    state = _filled_state(np.zeros(2), [[-3.0, 4.0]], config)
    updated, message = server_global_update(state, config)
    assert updated.x.tolist() == [3.0, -4.0]
    assert decode(message).tolist() == [0.0, -4.0]
    assert updated.x_hat.tolist() == [0.0, -4.0]
    local = client_background_apply(np.zeros(2), message)
    assert np.array_equal(local.view(np.uint32), updated.x_hat.view(np.uint32))


def test_identity_server_quantizer_tracks_model_exactly(rng):
    config = ProtocolConfig(K=1, eta_g=0.3)
    state = initial_server_state(rng.standard_normal(5))
    for _ in range(4):
        state = server_receive(state, _upload(rng.standard_normal(5)), 0, config)
        state, _ = server_global_update(state, config, rng)
    assert np.array_equal(state.x_hat.view(np.uint32), state.x.view(np.uint32))


def test_naive_direct_quantizes_the_model():
    config = ProtocolConfig(
        K=1, eta_g=1.0, server_quantizer=TOP_HALF, mode=ProtocolMode.NAIVE_DIRECT
    )
    state = _filled_state(np.zeros(2), [[-3.0, 4.0]], config, mode=ProtocolMode.NAIVE_DIRECT)
    assert state.x_hat is None
    updated, message = server_global_update(state, config)
    assert updated.x_hat is None
    assert decode(message).tolist() == [0.0, -4.0]
    client = client_apply_broadcast(
        initial_client_state(0, [9.0, 9.0]), decode(message), ProtocolMode.NAIVE_DIRECT
    )
    assert client.local_hat.tolist() == [0.0, -4.0]
    assert client.applied == 1


def test_unquantized_mode_broadcasts_model():
    config = ProtocolConfig(
        K=1, eta_g=1.0, server_quantizer=TOP_HALF, mode=ProtocolMode.UNQUANTIZED
    )
    state = _filled_state(np.zeros(2), [[-3.0, 4.0]], config, mode=ProtocolMode.UNQUANTIZED)
    updated, message = server_global_update(state, config)
    assert decode(message).tolist() == [3.0, -4.0]
    assert updated.x_hat.tolist() == [3.0, -4.0]


def test_broadcast_log_catch_up_and_prune():
    log = BroadcastLog(mode=ProtocolMode.QAFEL)
    log.append(_upload([1.0, 0.0]))
    log.append(_upload([0.0, 2.0]))
    assert log.version == 2
    client = log.catch_up(initial_client_state(0, [0.0, 0.0]))
    assert client.local_hat.tolist() == [1.0, 2.0]
    assert client.applied == 2
    lagging = initial_client_state(1, [0.0, 0.0])
    log.prune(1)
    assert log.version == 2
    assert log.offset == 1
    with pytest.raises(ProtocolError):
        log.catch_up(lagging)
    caught = log.catch_up(dataclasses.replace(lagging, applied=1))
    assert caught.local_hat.tolist() == [0.0, 2.0]


def test_replacing_modes_catch_up_to_latest_model():
    log = BroadcastLog(mode=ProtocolMode.UNQUANTIZED)
    log.append(_upload([1.0, 0.0]))
    log.append(_upload([0.0, 2.0]))
    client = log.catch_up(initial_client_state(0, [5.0, 5.0]))
    assert client.local_hat.tolist() == [0.0, 2.0]
    assert client.applied == 2


def test_client_ahead_of_server_is_rejected():
    log = BroadcastLog(mode=ProtocolMode.QAFEL)
    with pytest.raises(ProtocolError):
        log.catch_up(dataclasses.replace(initial_client_state(0, [0.0]), applied=1))


@pytest.mark.parametrize("fields", [{"K": 0}, {"P": 0}, {"eta_g": 0.0}, {"eta_l": float("inf")}])
def test_invalid_protocol_config(fields):
    with pytest.raises(ValidationError):
        ProtocolConfig(**fields)
