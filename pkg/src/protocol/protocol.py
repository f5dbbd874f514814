"""Server, client and hidden-state transitions of buffered quantized async FL.

Every transition takes a state and returns a new one; arrays are never
modified in place. Model vectors are float32 and all model arithmetic is done
in float32, so hidden-state copies that applied the same broadcasts are
bit-identical.

Sign convention: clients send Delta = y_0 - y_P and the server descends with
x <- x - eta_g * mean(Delta).
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

from errors import ProtocolError
from objectives.datasets import ClientShard
from objectives.objectives import ObjectiveSpec, stochastic_gradient
from quantizers.quantizers import (
    IDENTITY,
    MODEL_DTYPE,
    QuantizedMessage,
    QuantizerSpec,
    as_model_vector,
    decode,
    quantize,
)


class ProtocolMode(str, Enum):
    """Enum for the server broadcast scheme"""

    QAFEL = "qafel"
    NAIVE_DIRECT = "naive_direct"
    UNQUANTIZED = "unquantized"


class ProtocolConfig(BaseModel):
    """
    Buffer size K, local steps P, learning rates, quantizers and mode.
    ``K=1`` with ``staleness_scaling`` on is the FedAsync-style baseline.
    """

    K: int = 10
    P: int = 1
    eta_g: float = 0.1
    eta_l: float = 2.0
    server_quantizer: QuantizerSpec = IDENTITY
    client_quantizer: QuantizerSpec = IDENTITY
    staleness_scaling: bool = False
    mode: ProtocolMode = ProtocolMode.QAFEL
    batch_size: int = 32
    full_batch: bool = False

    class Config:
        extra = "forbid"

    @validator("K", "P", "batch_size", allow_reuse=True)
    def at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1. Given {v}")
        return v

    @validator("eta_g", "eta_l", allow_reuse=True)
    def positive_rate(cls, v, field):
        if not (v > 0.0 and math.isfinite(v)):
            raise ValueError(f"{field.name} must be a positive finite number. Given {v}")
        return v

    @property
    def uplink_quantizer(self) -> QuantizerSpec:
        return IDENTITY if self.mode == ProtocolMode.UNQUANTIZED else self.client_quantizer

    @property
    def downlink_quantizer(self) -> QuantizerSpec:
        return IDENTITY if self.mode == ProtocolMode.UNQUANTIZED else self.server_quantizer


@dataclass(frozen=True)
class BufferedUpdate:
    client_id: int
    delta: np.ndarray
    staleness: int


@dataclass(frozen=True)
class ServerState:
    """Server model x^t, hidden state x_hat^t (None in naive_direct) and buffer."""

    x: np.ndarray
    x_hat: Optional[np.ndarray]
    buffer: Tuple[BufferedUpdate, ...] = ()
    t: int = 0

    @property
    def k_filled(self) -> int:
        return len(self.buffer)


@dataclass(frozen=True)
class ClientTrainingRun:
    """One local training run started from the hidden state at ``base_version``."""

    client_id: int
    base_version: int
    y0: np.ndarray
    y: np.ndarray
    p: int = 0


@dataclass(frozen=True)
class ClientState:
    """
    A client's local copy of the broadcast model: the hidden state in qafel
    mode, the last received model otherwise. ``applied`` counts broadcasts.
    """

    client_id: int
    local_hat: np.ndarray
    applied: int = 0


def initial_server_state(x0, mode: ProtocolMode = ProtocolMode.QAFEL) -> ServerState:
    """x^0 = x_hat^0 = x0."""
    x = as_model_vector(x0)
    hidden = None if ProtocolMode(mode) == ProtocolMode.NAIVE_DIRECT else x.copy()
    return ServerState(x=x, x_hat=hidden)


def initial_client_state(client_id: int, x0) -> ClientState:
    return ClientState(client_id=client_id, local_hat=as_model_vector(x0))


def start_training_run(client: ClientState) -> ClientTrainingRun:
    """Copies the client's current model as y_0; its version is the broadcast count."""
    return ClientTrainingRun(
        client_id=client.client_id,
        base_version=client.applied,
        y0=client.local_hat.copy(),
        y=client.local_hat.copy(),
    )


def client_train(
    run: ClientTrainingRun,
    shard: ClientShard,
    objective: ObjectiveSpec,
    l2: float,
    config: ProtocolConfig,
    rng: np.random.Generator,
    quantizer_rng: Optional[np.random.Generator] = None,
) -> Tuple[QuantizedMessage, ClientTrainingRun]:
    """
    Runs P local SGD steps y_{p+1} = y_p - eta_l * g(y_p) and encodes
    Delta = y_0 - y_P with the client quantizer (identity in unquantized mode).

    Args:
        run (ClientTrainingRun): A fresh run (p = 0).
        shard (ClientShard): The client's data.
        objective (ObjectiveSpec): The loss.
        l2 (float): Resolved ridge strength.
        config (ProtocolConfig): Protocol parameters.
        rng (np.random.Generator): Minibatch sampling stream.
        quantizer_rng (np.random.Generator, optional): Client quantizer stream;
            defaults to ``rng``.

    Returns:
        Tuple[QuantizedMessage, ClientTrainingRun]: The upload and the finished run.
    """
    if run.p != 0:
        raise ProtocolError(f"training run of client {run.client_id} already advanced")
    eta_l = MODEL_DTYPE(config.eta_l)
    y = run.y0
    for _ in range(config.P):
        g = stochastic_gradient(
            objective, shard, y, config.batch_size, rng, l2, config.full_batch
        )
        y = y - eta_l * g.astype(MODEL_DTYPE)
    delta = run.y0 - y
    message, _ = quantize(
        config.uplink_quantizer, delta, quantizer_rng if quantizer_rng is not None else rng
    )
    return message, replace(run, y=y, p=config.P)


def staleness_weight(staleness: int) -> float:
    return 1.0 / math.sqrt(1.0 + staleness)


def server_receive(
    state: ServerState,
    message: QuantizedMessage,
    staleness: int,
    config: ProtocolConfig,
    client_id: int = -1,
) -> ServerState:
    """
    Decodes an upload, scales it by 1/sqrt(1 + tau) when staleness scaling is
    on and appends it to the buffer. The model is not touched.

    Raises:
        ProtocolError: Buffer already holds K updates, or tau < 0.
    """
    if state.k_filled >= config.K:
        raise ProtocolError(f"buffer overflow: {state.k_filled} of K={config.K} filled")
    if staleness < 0:
        raise ProtocolError(f"negative staleness {staleness}")
    delta = decode(message)
    if config.staleness_scaling:
        delta = delta * MODEL_DTYPE(staleness_weight(staleness))
    update = BufferedUpdate(client_id=client_id, delta=delta, staleness=staleness)
    return replace(state, buffer=state.buffer + (update,))


def server_global_update(
    state: ServerState, config: ProtocolConfig, rng: Optional[np.random.Generator] = None
) -> Tuple[ServerState, QuantizedMessage]:
    """
    Applies x^{t+1} = x^t - eta_g * mean(Delta) and builds the broadcast.

    qafel: q = Q_s(x^{t+1} - x_hat^t) and x_hat^{t+1} = x_hat^t + q.
    naive_direct: q = Q_s(x^{t+1}); no hidden state.
    unquantized: q carries x^{t+1} exactly.

    Args:
        state (ServerState): State with a full buffer.
        config (ProtocolConfig): Protocol parameters.
        rng (np.random.Generator, optional): Server quantizer stream.

    Returns:
        Tuple[ServerState, QuantizedMessage]: Next state (empty buffer, t + 1)
            and the broadcast message.

    Raises:
        ProtocolError: Buffer is not full.
    """
    if state.k_filled != config.K:
        raise ProtocolError(f"global update with {state.k_filled} of K={config.K} updates")
    stacked = np.stack([u.delta for u in state.buffer]).astype(np.float64)
    mean_delta = (stacked.sum(axis=0) / config.K).astype(MODEL_DTYPE)
    step = -(MODEL_DTYPE(config.eta_g) * mean_delta)
    x_next = state.x + step

    mode = config.mode
    if mode == ProtocolMode.QAFEL:
        # (x - x_hat) + step rather than x_next - x_hat: with x_hat == x the
        # argument is exactly step, so a lossless quantizer keeps x_hat == x_next
        message, decoded = quantize(config.server_quantizer, (state.x - state.x_hat) + step, rng)
        x_hat = state.x_hat + decoded
    elif mode == ProtocolMode.NAIVE_DIRECT:
        message, _ = quantize(config.server_quantizer, x_next, rng)
        x_hat = None
    else:
        message, _ = quantize(IDENTITY, x_next)
        x_hat = x_next.copy()
    return ServerState(x=x_next, x_hat=x_hat, buffer=(), t=state.t + 1), message


def client_background_apply(local_hat, q_t: QuantizedMessage) -> np.ndarray:
    """x_hat_local + decode(q_t)."""
    return as_model_vector(local_hat) + decode(q_t)


def client_apply_broadcast(
    client: ClientState, decoded: np.ndarray, mode: ProtocolMode
) -> ClientState:
    """
    Applies one decoded broadcast: added to the hidden state in qafel mode,
    replacing the local model otherwise.
    """
    if mode == ProtocolMode.QAFEL:
        local = client.local_hat + decoded
    else:
        local = decoded.copy()
    return replace(client, local_hat=local, applied=client.applied + 1)


@dataclass
class BroadcastLog:
    """
    Ordered server broadcasts with their decoded vectors. Clients catch up
    lazily before a run; entries every client has applied can be pruned.
    """

    mode: ProtocolMode
    messages: List[QuantizedMessage] = field(default_factory=list)
    decoded: List[np.ndarray] = field(default_factory=list)
    offset: int = 0

    @property
    def version(self) -> int:
        return self.offset + len(self.messages)

    def append(self, message: QuantizedMessage) -> None:
        self.messages.append(message)
        self.decoded.append(decode(message))

    def catch_up(self, client: ClientState) -> ClientState:
        """Applies every broadcast the client has not seen, in order."""
        if client.applied < self.offset:
            raise ProtocolError(
                f"client {client.client_id} needs pruned broadcast {client.applied}"
            )
        if client.applied > self.version:
            raise ProtocolError(f"client {client.client_id} is ahead of the server")
        pending = range(client.applied - self.offset, len(self.decoded))
        if self.mode != ProtocolMode.QAFEL and len(pending) > 0:
            # only the latest model matters when broadcasts replace the local copy
            return replace(
                client,
                local_hat=self.decoded[-1].copy(),
                applied=self.version,
            )
        for index in pending:
            client = client_apply_broadcast(client, self.decoded[index], self.mode)
        return client

    def prune(self, min_applied: int) -> None:
        drop = min_applied - self.offset
        if drop > 0:
            del self.messages[:drop]
            del self.decoded[:drop]
            self.offset += drop
