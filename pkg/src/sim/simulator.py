"""Deterministic discrete-event simulation of buffered asynchronous FL.

One ``Simulation`` owns the event heap, the server state, the client states
and all counters. Events are ordered by (time, tiebreak_seq); no wall clock is
read anywhere. Randomness comes from independent streams of the run seed, so
changing a quantizer leaves the delay and event sequence untouched.
"""
import heapq
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import paths
from data_models.run_config import DatasetSourceKind, RunConfig
from errors import DatasetNotFoundError, InfeasibleConfigError, ProtocolError
from logger import get_logger
from objectives.datasets import ClientShard, Dataset, DatasetCache, partition, synthesize
from objectives.objectives import (
    FederatedObjective,
    ObjectiveKind,
    OracleResult,
    cached_minimize,
)
from protocol.protocol import (
    BroadcastLog,
    ClientState,
    ClientTrainingRun,
    ProtocolMode,
    ServerState,
    client_train,
    initial_client_state,
    initial_server_state,
    server_global_update,
    server_receive,
    start_training_run,
)
from quantizers.quantizers import MODEL_DTYPE
from sim.events import (
    ArrivalKind,
    EventKind,
    SimEvent,
    next_arrival,
    sample_duration,
)
from utils import SeedStreams

logger = get_logger(task_name="sim")

METRICS_COLUMNS = [
    "t",
    "sim_time",
    "f_minus_fstar",
    "grad_norm_sq",
    "ergodic_grad_norm_sq",
    "uploads",
    "upload_bytes",
    "download_bytes",
    "max_staleness",
]


@dataclass(frozen=True)
class MetricsRow:
    """Observer measurement of x^t after server step t."""

    t: int
    sim_time: float
    f_minus_fstar: float
    grad_norm_sq: float
    ergodic_grad_norm_sq: float
    uploads: int
    upload_bytes: int
    download_bytes: int
    max_staleness: int


@dataclass
class Problem:
    """A dataset, its shards, the bound objective and its optimum; reused across seeds."""

    objective: FederatedObjective
    oracle: OracleResult
    x0: np.ndarray
    used_fallback: bool = False

    @property
    def f_star(self) -> float:
        return self.oracle.f_star

    @property
    def dataset(self) -> Dataset:
        return self.objective.dataset

    @property
    def shards(self) -> List[ClientShard]:
        return list(self.objective.shards)


@dataclass
class SimulationResult:
    rows: List[MetricsRow]
    staleness_trace: List[int]
    event_trace: List[Tuple[float, str, int]]
    final_x: np.ndarray
    initial_f_minus_fstar: float
    initial_grad_norm_sq: float
    rejected_arrivals: int = 0
    broadcasts: int = 0
    download_messages: int = 0
    server_steps: int = 0
    hidden_state_checks: int = 0
    iterates: Optional[List[np.ndarray]] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(row) for row in self.rows], columns=METRICS_COLUMNS)
        for column in ("t", "uploads", "upload_bytes", "download_bytes", "max_staleness"):
            frame[column] = frame[column].astype("int64")
        return frame

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.event_trace, columns=["time", "kind", "client_id"])


def _load_dataset(config: RunConfig, dataset_dir: str) -> Tuple[Optional[Dataset], bool]:
    data = config.data
    binary = config.objective.kind == ObjectiveKind.LOGISTIC_L2
    if data.source == DatasetSourceKind.SYNTHETIC:
        return None, False
    cache = DatasetCache(dataset_dir)
    try:
        if data.source == DatasetSourceKind.MUSHROOMS:
            return cache.load_mushrooms(data.path or paths.MUSHROOMS_FILE_NAME), False
        return cache.load(data.path, binary_labels=binary), False
    except DatasetNotFoundError as exc:
        if not data.fallback_to_synthetic:
            raise
        logger.warning(f"{exc} Falling back to synthetic logistic data.")
        return None, True


def prepare_problem(
    config: RunConfig,
    dataset_dir: Optional[str] = None,
    cache_dir: Optional[str] = None,
) -> Problem:
    """
    Loads or synthesizes the data, splits it across clients and solves for f*.

    Only ``config.objective`` and ``config.data`` are read, so one Problem
    serves every run seed and protocol variant.
    """
    data = config.data
    dataset_dir = dataset_dir or config.output.dataset_dir or paths.DATASETS_DIR
    if cache_dir is None:
        cache_dir = config.output.cache_dir
    streams = SeedStreams(data.seed)

    dataset, used_fallback = _load_dataset(config, dataset_dir)
    if dataset is None:
        dataset, shards = synthesize(
            config.objective.kind.value,
            data.synthetic_rows,
            data.synthetic_features,
            data.n_clients,
            data.dirichlet_alpha if data.partition.value == "dirichlet" else None,
            streams.generator("data"),
            partition_rng=streams.generator("partition"),
            weights=data.weights,
            label_noise=data.synthetic_label_noise,
        )
    else:
        shards = partition(
            dataset,
            data.n_clients,
            streams.generator("partition"),
            kind=data.partition,
            dirichlet_alpha=data.dirichlet_alpha,
            weights=data.weights,
        )
    objective = FederatedObjective(config.objective, dataset, shards)
    logger.info(
        f"Problem: {dataset.name} {dataset.num_rows}x{dataset.num_features}, "
        f"{len(shards)} clients, lambda={objective.l2:.6g}"
    )
    oracle = cached_minimize(config.objective, dataset, shards, cache_dir=cache_dir)
    return Problem(
        objective=objective,
        oracle=oracle,
        x0=np.zeros(dataset.num_features, dtype=MODEL_DTYPE),
        used_fallback=used_fallback,
    )


class Simulation:
    """
    Event loop for one (config, problem, seed).

    Fixed pool: every pool client starts at time 0 and restarts right after
    each upload, first catching up on outstanding broadcasts. Open arrival:
    arrivals on the grid k / rate draw a client uniformly from the population,
    are dropped when ``concurrency_cap`` clients are training, and leave after
    their upload. Broadcasts count one download per population client.
    """

    def __init__(
        self, config: RunConfig, problem: Problem, record_iterates: bool = False
    ) -> None:
        self.config = config
        self.problem = problem
        self.protocol = config.protocol
        self.objective = problem.objective
        self.population = self.objective.num_clients

        streams = SeedStreams(config.seed)
        self.sampling_rng = streams.generator("sampling")
        self.client_quantizer_rng = streams.generator("client_quantizer")
        self.server_quantizer_rng = streams.generator("server_quantizer")
        self.delay_rng = streams.generator("delays")
        self.arrival_rng = streams.generator("arrivals")

        self.server: ServerState = initial_server_state(problem.x0, self.protocol.mode)
        self.log = BroadcastLog(mode=self.protocol.mode)
        self.clients: Dict[int, ClientState] = {}
        self.runs: Dict[int, ClientTrainingRun] = {}
        self.queue: List[SimEvent] = []
        self.seq = 0
        self.now = 0.0

        self.uploads = 0
        self.upload_bytes = 0
        self.download_bytes = 0
        self.download_messages = 0
        self.rejected_arrivals = 0
        self.active = 0
        self.max_staleness = 0
        self.staleness_trace: List[int] = []
        self.event_trace: List[Tuple[float, str, int]] = []
        self.rows: List[MetricsRow] = []
        self.measured: List[float] = []
        self.hidden_state_checks = 0
        self.iterates: Optional[List[np.ndarray]] = [] if record_iterates else None

    def _push(self, time: float, kind: EventKind, client_id: int = -1) -> None:
        heapq.heappush(self.queue, SimEvent(time, self.seq, kind, client_id))
        self.seq += 1

    def _broadcast_model(self) -> np.ndarray:
        if self.protocol.mode == ProtocolMode.QAFEL:
            return self.server.x_hat
        if self.protocol.mode == ProtocolMode.UNQUANTIZED:
            return self.server.x
        return self.log.decoded[-1] if self.log.decoded else self.problem.x0

    def _start_client(self, client_id: int) -> None:
        if self.config.arrival.kind == ArrivalKind.FIXED_POOL:
            client = self.log.catch_up(self.clients[client_id])
            if self.server.x_hat is not None and not np.array_equal(
                client.local_hat, self.server.x_hat
            ):
                raise ProtocolError(
                    f"hidden state of client {client_id} diverged from the server after "
                    f"{client.applied} broadcasts"
                )
            if self.server.x_hat is not None:
                self.hidden_state_checks += 1
        else:
            # a joining client receives the current broadcast model
            client = ClientState(
                client_id=client_id,
                local_hat=self._broadcast_model().copy(),
                applied=self.log.version,
            )
        self.clients[client_id] = client
        self.runs[client_id] = start_training_run(client)
        self.active += 1
        duration = sample_duration(self.config.delay, self.delay_rng)
        self._push(self.now + duration, EventKind.CLIENT_DONE, client_id)

    def _measure(self, x: np.ndarray) -> Tuple[float, float]:
        gap = self.objective.loss(x) - self.problem.f_star
        grad = self.objective.gradient(x)
        return gap, float(grad @ grad)

    def _record(self) -> None:
        t = self.server.t
        gap, grad_sq = self._measure(self.server.x)
        self.rows.append(
            MetricsRow(
                t=t,
                sim_time=self.now,
                f_minus_fstar=gap,
                grad_norm_sq=grad_sq,
                ergodic_grad_norm_sq=float(np.mean(self.measured)),
                uploads=self.uploads,
                upload_bytes=self.upload_bytes,
                download_bytes=self.download_bytes,
                max_staleness=self.max_staleness,
            )
        )
        self.measured.append(grad_sq)

    def _log_buffer_heterogeneity(self, buffer) -> None:
        x = self.server.x
        grad = self.objective.gradient(x)
        gaps = [
            float(np.sum((grad - self.objective.client_gradient(u.client_id, x)) ** 2))
            for u in buffer
        ]
        logger.debug(f"t={self.server.t} buffer-set heterogeneity {np.mean(gaps):.6g}")

    def _on_client_done(self, client_id: int) -> None:
        run = self.runs.pop(client_id)
        self.active -= 1
        message, _ = client_train(
            run,
            self.objective.shards[client_id],
            self.objective.spec,
            self.objective.l2,
            self.protocol,
            self.sampling_rng,
            self.client_quantizer_rng,
        )
        staleness = self.server.t - run.base_version
        self.staleness_trace.append(staleness)
        self.max_staleness = max(self.max_staleness, staleness)
        self.uploads += 1
        self.upload_bytes += message.num_bytes
        self.server = server_receive(self.server, message, staleness, self.protocol, client_id)

        if self.server.k_filled == self.protocol.K:
            buffer = self.server.buffer
            self.server, broadcast = server_global_update(
                self.server, self.protocol, self.server_quantizer_rng
            )
            self.log.append(broadcast)
            if self.iterates is not None:
                self.iterates.append(self.server.x.copy())
            self.download_bytes += broadcast.num_bytes * self.population
            self.download_messages += self.population
            if logger.isEnabledFor(logging.DEBUG):
                self._log_buffer_heterogeneity(buffer)
            every = self.config.metrics.every
            if self.server.t % every == 0 or self.server.t == self.config.T:
                self._record()

        if self.config.arrival.kind == ArrivalKind.FIXED_POOL:
            if not self.done:
                self._start_client(client_id)
                self.log.prune(min(c.applied for c in self.clients.values()))
        else:
            # joiners copy the latest broadcast model; only in-flight runs pin entries
            in_flight = [self.clients[c].applied for c in self.runs]
            self.log.prune(min(in_flight, default=self.log.version))

    def _on_arrival(self) -> None:
        arrival = self.config.arrival
        client_id = int(self.arrival_rng.integers(0, self.population))
        if arrival.concurrency_cap is not None and self.active >= arrival.concurrency_cap:
            self.rejected_arrivals += 1
        elif client_id in self.runs:
            # the drawn client is already training; counts as a dropped arrival
            self.rejected_arrivals += 1
        else:
            self._start_client(client_id)
        self._push(next_arrival(arrival, self.now), EventKind.CLIENT_ARRIVAL)

    @property
    def done(self) -> bool:
        return self.server.t >= self.config.T

    def run(self) -> SimulationResult:
        """Advances the event queue until T server steps complete."""
        initial_gap, initial_grad_sq = self._measure(self.server.x)
        self.measured.append(initial_grad_sq)

        if self.config.arrival.kind == ArrivalKind.FIXED_POOL:
            for client_id in range(self.config.arrival.pool_size):
                self.clients[client_id] = initial_client_state(client_id, self.problem.x0)
            for client_id in range(self.config.arrival.pool_size):
                self._start_client(client_id)
        else:
            self._push(0.0, EventKind.CLIENT_ARRIVAL)

        while not self.done:
            if not self.queue:
                raise InfeasibleConfigError("event queue drained before T server steps")
            event = heapq.heappop(self.queue)
            if event.time < self.now:
                raise ProtocolError("event time went backwards")
            self.now = event.time
            self.event_trace.append((event.time, event.kind.value, event.client_id))
            if event.kind == EventKind.CLIENT_DONE:
                self._on_client_done(event.client_id)
            else:
                self._on_arrival()

        return SimulationResult(
            rows=self.rows,
            staleness_trace=self.staleness_trace,
            event_trace=self.event_trace,
            final_x=self.server.x.copy(),
            initial_f_minus_fstar=initial_gap,
            initial_grad_norm_sq=initial_grad_sq,
            rejected_arrivals=self.rejected_arrivals,
            broadcasts=self.log.version,
            download_messages=self.download_messages,
            server_steps=self.server.t,
            hidden_state_checks=self.hidden_state_checks,
            iterates=self.iterates,
        )


def run_simulation(
    config: RunConfig, problem: Optional[Problem] = None, record_iterates: bool = False
) -> SimulationResult:
    """
    Runs one simulation.

    Args:
        config (RunConfig): The experiment.
        problem (Problem, optional): Prepared data and optimum; built from the
            config when omitted.
        record_iterates (bool): Keep a copy of x^t after every server step.

    Returns:
        SimulationResult: Metric rows, staleness and event traces and totals.
    """
    if problem is None:
        problem = prepare_problem(config)
    if problem.objective.num_clients != config.data.n_clients:
        raise InfeasibleConfigError(
            f"problem has {problem.objective.num_clients} clients, "
            f"config asks for {config.data.n_clients}"
        )
    logger.info(
        f"Simulating {config.protocol.mode.value}: K={config.protocol.K}, "
        f"P={config.protocol.P}, T={config.T}, seed={config.seed}, "
        f"server={config.protocol.downlink_quantizer.describe()}, "
        f"client={config.protocol.uplink_quantizer.describe()}"
    )
    return Simulation(config, problem, record_iterates).run()
