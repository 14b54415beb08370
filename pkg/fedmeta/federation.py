#!/usr/bin/env python3
"""
Parameter server for federated Reptile.

Each round the server selects M_r users, broadcasts the global model, waits
for the selected clients (run concurrently in a thread pool), applies the
first M_min arrivals as a weighted delta sum and logs the round.
"""

import asyncio
import json
import logging
import os
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from .episodes import Dataset
from .errors import LayoutMismatchError, QuorumError
from .meta_reptile import ReptileConfig, local_meta_train
from .nn_core import NetworkSpec, ParamVector, save_checkpoint
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

SERVER_ID = -1
WEIGHTING_MODES = ('uniform', 'dataset_size', 'explicit')


@dataclass
class FederationConfig:
    users: int = 4
    selected: int = 3
    quorum: int = 3
    rounds: int = 1
    weighting: str = 'uniform'
    weights: Optional[List[float]] = None
    attacker_id: Optional[int] = None
    attack_round: Optional[int] = None

    def violations(self) -> List[Tuple[str, str]]:
        problems = []
        if self.users < 1:
            problems.append(('users', 'must be >= 1'))
        if not 1 <= self.quorum <= self.selected:
            problems.append(('quorum', f'M_min={self.quorum} must satisfy 1 <= M_min <= selected={self.selected}'))
        if self.selected > self.users:
            problems.append(('selected', f'M_r={self.selected} exceeds users={self.users}'))
        if self.weighting not in WEIGHTING_MODES:
            problems.append(('weighting', f'unknown mode {self.weighting!r}'))
        if self.weighting == 'explicit':
            if not self.weights or len(self.weights) != self.users:
                problems.append(('weights', f'explicit weighting needs {self.users} weights'))
            elif any(w <= 0 for w in self.weights):
                problems.append(('weights', 'weights must be positive'))
        if (self.attacker_id is None) != (self.attack_round is None):
            problems.append(('attack_round', 'attacker id and attack round go together'))
        if self.attacker_id is not None:
            if not 0 <= self.attacker_id < self.users:
                problems.append(('attacker_id', f'{self.attacker_id} is not a user id'))
            if self.selected > self.users - 1:
                problems.append(('selected', 'with an attacker, M_r must be <= users - 1 outside the attack round'))
        return problems

    @property
    def has_attack(self) -> bool:
        return self.attacker_id is not None


class MessageKind(Enum):
    BROADCAST = 'broadcast'
    UPDATE = 'update'
    ACK = 'ack'


@dataclass
class Message:
    kind: MessageKind
    round_index: int
    sender: int
    payload: Any = None


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    delta: ParamVector
    dataset_size: int = 1
    weight: Optional[float] = None


class Client(Protocol):
    client_id: int

    def local_update(self, broadcast: Message, seed: int) -> ClientUpdate:
        ...


@dataclass
class RoundLog:
    round_index: int
    selected: List[int]
    arrivals: List[int]
    applied: List[int]
    checkpoint: Optional[str] = None
    metrics: Dict[str, float] = field(default_factory=dict)
    update_norms: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['update_norms'] = {str(k): v for k, v in self.update_norms.items()}
        return data


@dataclass
class ServerState:
    round_index: int
    theta: ParamVector
    history: List[RoundLog] = field(default_factory=list)


def shard_classes(classes: Sequence[int], users: int, mode: str = 'disjoint', seed: int = 0) -> Dict[int, List[int]]:
    """Split classes among users.

    disjoint: a seeded partition into near-equal shards. overlapping: every
    user independently draws twice its disjoint share (capped at all classes).
    """
    rng = np.random.default_rng(seed)
    classes = sorted(int(c) for c in classes)
    if mode == 'disjoint':
        order = rng.permutation(classes)
        return {u: sorted(int(c) for c in part) for u, part in enumerate(np.array_split(order, users))}
    if mode == 'overlapping':
        share = min(len(classes), 2 * -(-len(classes) // users))
        return {u: sorted(int(c) for c in rng.choice(classes, size=share, replace=False)) for u in range(users)}
    raise ValueError(f"unknown sharding mode {mode!r}")


def select_clients(cfg: FederationConfig, round_index: int, seed: int) -> List[int]:
    """M_r distinct users; the attacker only and always in the attack round."""
    rng = rng_for(seed, 'select', round_index)
    users = list(range(cfg.users))
    if not cfg.has_attack:
        return sorted(int(u) for u in rng.choice(users, size=cfg.selected, replace=False))
    others = [u for u in users if u != cfg.attacker_id]
    if round_index == cfg.attack_round:
        chosen = list(rng.choice(others, size=cfg.selected - 1, replace=False)) + [cfg.attacker_id]
    else:
        chosen = list(rng.choice(others, size=cfg.selected, replace=False))
    return sorted(int(u) for u in chosen)


def compute_delta(theta_local: ParamVector, theta_global: ParamVector) -> ParamVector:
    theta_local.check_compatible(theta_global)
    return theta_local - theta_global


def scale_boost(delta: ParamVector, factor: float) -> ParamVector:
    """Boosted update factor * delta."""
    return delta * factor


def aggregation_weights(cfg: FederationConfig, applied: Sequence[ClientUpdate]) -> Dict[int, float]:
    if cfg.weighting == 'uniform':
        return {u.client_id: 1.0 / cfg.quorum for u in applied}
    if cfg.weighting == 'dataset_size':
        total = float(sum(u.dataset_size for u in applied))
        return {u.client_id: u.dataset_size / total for u in applied}
    return {u.client_id: float(cfg.weights[u.client_id]) for u in applied}


def aggregate(theta_global: ParamVector, updates: Sequence[ClientUpdate], weights: Mapping[int, float],
              quorum: int) -> ParamVector:
    """theta + sum of weight_i * delta_i over the first `quorum` updates.

    Accumulates in float64 in client-id order, so the arrival permutation of
    the applied set does not change the result.
    """
    if len(updates) < quorum:
        raise QuorumError(f"{len(updates)} updates arrived, quorum is {quorum}")
    applied = sorted(updates[:quorum], key=lambda u: u.client_id)
    total = theta_global.values.astype(np.float64)
    for update in applied:
        theta_global.check_compatible(update.delta)
        total = total + weights[update.client_id] * update.delta.values.astype(np.float64)
    return ParamVector(total.astype(theta_global.dtype), theta_global.layout).ensure_finite('aggregation')


class BenignClient:
    """A user running plain local Reptile on its own shard; no state across rounds."""

    def __init__(self, client_id: int, dataset: Dataset, cfg: ReptileConfig, spec: NetworkSpec):
        self.client_id = client_id
        self.dataset = dataset
        self.cfg = cfg
        self.spec = spec
        self.dataset_size = sum(len(d) for d in dataset.classes.values())

    def local_update(self, broadcast: Message, seed: int) -> ClientUpdate:
        theta = broadcast.payload
        local = local_meta_train(theta, self.dataset, self.cfg, self.spec, seed)
        return ClientUpdate(self.client_id, broadcast.round_index, compute_delta(local, theta), self.dataset_size)


class FederationMetrics:
    """Prometheus instruments for one run, kept in their own registry."""

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()
        self.rounds_total = Counter(
            'fedmeta_rounds',
            'Completed federation rounds',
            registry=self.registry
        )
        self.round_duration = Histogram(
            'fedmeta_round_duration_seconds',
            'Wall time of a federation round',
            registry=self.registry
        )
        self.update_norm = Gauge(
            'fedmeta_update_norm',
            'L2 norm of the last update sent by a client',
            ['client', 'kind'],
            registry=self.registry
        )
        self.updates_applied = Gauge(
            'fedmeta_updates_applied',
            'Updates aggregated in the last round',
            registry=self.registry
        )
        self.accuracy = Gauge(
            'fedmeta_accuracy',
            'Latest accuracy per metric and client',
            ['metric', 'client'],
            registry=self.registry
        )

    def write(self, path: str):
        write_to_textfile(path, self.registry)


class RoundLogWriter:
    """JSON-lines round log, one object per round."""

    def __init__(self, path: str):
        self.path = path
        with open(self.path, 'w'):
            pass

    def write(self, log: RoundLog):
        with open(self.path, 'a') as f:
            f.write(json.dumps(log.to_dict(), sort_keys=True) + '\n')


async def run_round(state: ServerState, clients: Mapping[int, Client], cfg: FederationConfig, seed: int,
                    executor: Optional[Executor] = None,
                    attacker_ids: Sequence[int] = ()) -> Tuple[ServerState, RoundLog]:
    """One round: select, broadcast, collect, aggregate, log."""
    r = state.round_index
    selected = select_clients(cfg, r, seed)
    missing = [c for c in selected if c not in clients]
    if missing:
        raise QuorumError(f"selected users {missing} have no client")
    logger.info(f"Round {r}: selected users {selected}")

    broadcast = Message(MessageKind.BROADCAST, r, SERVER_ID, state.theta)
    loop = asyncio.get_running_loop()
    futures = [
        loop.run_in_executor(executor, clients[c].local_update, broadcast, derive_seed(seed, 'client', c, 'round', r))
        for c in selected
    ]
    # every client finishes before a failure is raised
    results = await asyncio.gather(*futures, return_exceptions=True)
    failures = [(c, result) for c, result in zip(selected, results) if isinstance(result, BaseException)]
    for client_id, error in failures:
        logger.error(f"Round {r}: user {client_id} failed: {error!r}")
    if failures:
        raise failures[0][1]

    received: Dict[int, ClientUpdate] = {}
    for client_id, result in zip(selected, results):
        if result.delta.layout != state.theta.layout:
            raise LayoutMismatchError(f"update from user {client_id} does not match the global layout")
        received[client_id] = result

    order = rng_for(seed, 'arrival', r).permutation(len(selected))
    arrivals = [received[selected[i]] for i in order if selected[i] in received]
    if len(arrivals) < cfg.quorum:
        raise QuorumError(f"round {r}: {len(arrivals)} updates arrived, quorum is {cfg.quorum}")
    applied = arrivals[:cfg.quorum]
    weights = aggregation_weights(cfg, applied)
    theta_next = aggregate(state.theta, applied, weights, cfg.quorum)

    norms = {u.client_id: u.delta.norm() for u in arrivals}
    for client_id, norm in norms.items():
        kind = 'attacker' if client_id in attacker_ids else 'benign'
        logger.debug(f"Round {r}: {kind} user {client_id} update norm {norm:.6f}")
    log = RoundLog(
        round_index=r,
        selected=selected,
        arrivals=[u.client_id for u in arrivals],
        applied=sorted(u.client_id for u in applied),
        update_norms=norms,
    )
    logger.info(f"Round {r}: applied updates from {log.applied}")
    return ServerState(r + 1, theta_next, state.history + [log]), log


class FederationServer:
    """Round driver with a thread pool, checkpoints, round logs and telemetry."""

    def __init__(self, cfg: FederationConfig, theta: ParamVector, clients: Mapping[int, Client], seed: int,
                 out_dir: Optional[str] = None, metrics: Optional[FederationMetrics] = None,
                 max_workers: Optional[int] = None, attacker_ids: Sequence[int] = ()):
        self.cfg = cfg
        self.clients = dict(clients)
        self.seed = seed
        self.state = ServerState(0, theta)
        self.out_dir = out_dir
        self.metrics = metrics or FederationMetrics()
        self.attacker_ids = tuple(attacker_ids)
        self.messages: List[Message] = []
        self.executor = ThreadPoolExecutor(max_workers=max_workers or len(self.clients) or 1)
        self.log_writer = None
        if out_dir:
            os.makedirs(os.path.join(out_dir, 'checkpoints'), exist_ok=True)
            self.log_writer = RoundLogWriter(os.path.join(out_dir, 'rounds.jsonl'))

    @property
    def theta(self) -> ParamVector:
        return self.state.theta

    async def run_round(self, metrics: Optional[Dict[str, float]] = None) -> RoundLog:
        start_time = time.time()
        r = self.state.round_index
        self.messages.append(Message(MessageKind.BROADCAST, r, SERVER_ID, None))
        self.state, log = await run_round(self.state, self.clients, self.cfg, self.seed,
                                          self.executor, self.attacker_ids)
        for client_id in log.arrivals:
            self.messages.append(Message(MessageKind.UPDATE, r, client_id, None))
        for client_id in log.applied:
            self.messages.append(Message(MessageKind.ACK, r, SERVER_ID, client_id))

        if metrics:
            log.metrics.update(metrics)
        if self.out_dir:
            path = os.path.join(self.out_dir, 'checkpoints', f'round_{r:04d}.fmb')
            save_checkpoint(path, self.state.theta)
            log.checkpoint = os.path.relpath(path, self.out_dir)

        self.metrics.rounds_total.inc()
        self.metrics.round_duration.observe(time.time() - start_time)
        self.metrics.updates_applied.set(len(log.applied))
        for client_id, norm in log.update_norms.items():
            kind = 'attacker' if client_id in self.attacker_ids else 'benign'
            self.metrics.update_norm.labels(client=str(client_id), kind=kind).set(norm)
        return log

    def record_metrics(self, log: RoundLog, metrics: Dict[str, float], client: str = 'global'):
        """Attach evaluation results to a finished round and export them."""
        log.metrics.update(metrics)
        for name, value in metrics.items():
            self.metrics.accuracy.labels(metric=name, client=client).set(value)

    def flush_log(self, log: RoundLog):
        if self.log_writer:
            self.log_writer.write(log)

    async def run(self, rounds: int) -> List[RoundLog]:
        logs = []
        for _ in range(rounds):
            log = await self.run_round()
            self.flush_log(log)
            logs.append(log)
        return logs

    def close(self):
        self.executor.shutdown(wait=True)
