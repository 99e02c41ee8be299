"""Round loop for the Local, FedAvg and DAMe strategies.

Clients and the server live in one process.  The only objects crossing the
client/server boundary are :class:`ParamVector` uploads and dispatches;
servers never see a client's dataset.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attacks, bola, sega
from .data_model import Dataset, MessageGraph, project_homogeneous, sample_neighborhood
from .encoder import AdamState, EncoderConfig, ParamVector, init_params, weighted_sum
from .local_opt import TrainConfig, embed, local_train_epoch
from .metrics import cluster_scores

log = logging.getLogger(__name__)

STRATEGIES = ("local", "fedavg", "dame")
ROLES = ("honest", "model_poisoner", "data_poisoner")


class ConfigError(ValueError):
    pass


class RoundError(RuntimeError):
    def __init__(self, round_: int, phase: str, client: Optional[int], cause: Exception):
        where = f"round {round_}, phase {phase}" + (f", client {client}" if client is not None else "")
        super().__init__(f"{where}: {cause}")
        self.round = round_
        self.phase = phase
        self.client = client


@dataclass
class ExperimentConfig:
    strategy: str = "dame"
    rounds: int = 20
    seed: int = 0
    encoder: Dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    bola: bola.BolaConfig = field(default_factory=bola.BolaConfig)
    eval_fanouts: Tuple[int, int] = (800, 100)
    use_bola: bool = True
    use_sega: bool = True
    roles: Dict[int, str] = field(default_factory=dict)
    poison_rate: float = 0.3

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for k, role in self.roles.items():
            if role not in ROLES:
                raise ConfigError(f"client {k}: unknown role {role!r}")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ConfigError("poison_rate must lie in (0, 1]")


def fedavg_aggregate(locals_: Sequence[ParamVector], sample_counts: Sequence[int]) -> ParamVector:
    """Sample-count weighted mean of the uploaded models."""
    counts = np.asarray(sample_counts, dtype=np.float64)
    if len(locals_) != counts.size or counts.size == 0:
        raise ValueError("need one sample count per model")
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    if len(locals_) == 1:
        return locals_[0].copy()
    return weighted_sum(locals_, counts / counts.sum())


@dataclass
class ClientState:
    id: int
    dataset: Dataset
    graph: MessageGraph
    theta: ParamVector
    adam: AdamState
    seed: int
    role: str = "honest"
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def n_train(self) -> int:
        return int(self.dataset.splits["train"].size)

    def upload(self, round_: int) -> ParamVector:
        if self.role == "model_poisoner":
            return attacks.poison_model(self.theta, seed=self.seed * 7919 + round_)
        return self.theta


@dataclass
class RoundLog:
    round: int
    strategy: str
    metrics: Dict[int, Dict[str, float]]
    lambdas: Dict[int, float] = field(default_factory=dict)
    partition: List[List[int]] = field(default_factory=list)
    similarity: Optional[np.ndarray] = None
    agg_weights: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)
    bytes_per_client: Dict[int, int] = field(default_factory=dict)
    bola_traces: Dict[int, List[bola.TraceRow]] = field(default_factory=dict)
    bola_local_scores: Dict[int, float] = field(default_factory=dict)
    bola_best_scores: Dict[int, float] = field(default_factory=dict)
    train_logs: Dict[int, list] = field(default_factory=dict)


class Federation:
    """K simulated clients plus one server running a chosen strategy."""

    def __init__(self, config: ExperimentConfig, datasets: Sequence[Dataset]):
        config.validate()
        if not datasets:
            raise ConfigError("no client datasets")
        self.config = config
        d_in = datasets[0].text_dim + 2
        if any(ds.text_dim + 2 != d_in for ds in datasets):
            raise ConfigError("all clients must share the embedding width")
        self.enc = EncoderConfig(d_in=d_in, **config.encoder)
        theta0 = init_params(self.enc, seed=config.seed)
        self.clients: List[ClientState] = []
        for k, ds in enumerate(datasets):
            role = config.roles.get(k, "honest")
            seed = config.seed * 1000 + k + 1
            if role == "data_poisoner":
                ds = _poison_dataset(ds, config.poison_rate, seed)
            self.clients.append(ClientState(
                id=k, dataset=ds, graph=project_homogeneous(ds.messages),
                theta=theta0.copy(), adam=AdamState.zeros(len(theta0)), seed=seed, role=role))
        self.param_bytes = len(theta0.to_bytes())

    @property
    def K(self) -> int:
        return len(self.clients)

    # -- phases -----------------------------------------------------------

    def _evaluate(self, c: ClientState) -> Dict[str, float]:
        idx = c.dataset.splits["test"]
        H = embed(c.theta, self.enc, c.graph, idx, self.config.eval_fanouts, seed=c.seed)
        return cluster_scores(H, c.graph.labels[idx], seed=c.seed)

    def _train(self, c: ClientState, theta: ParamVector,
               theta_global: Optional[ParamVector]) -> list:
        c.theta, c.adam, logs = local_train_epoch(
            theta, self.enc, c.graph, c.dataset.splits["train"], c.adam, c.rng,
            self.config.train, theta_global=theta_global)
        return logs

    def _validation_task(self, c: ClientState, round_: int) -> bola.ValidationTask:
        idx = c.dataset.splits["val"]
        sub = sample_neighborhood(c.graph, idx, self.config.eval_fanouts,
                                  seed=c.seed * 31 + round_)
        return bola.ValidationTask(self.enc, sub, c.graph.features,
                                   c.graph.labels[sub.nodes[:sub.n_out]], seed=c.seed)

    def server_sega(self, uploads: Sequence[ParamVector], round_: int, log_: RoundLog
                    ) -> List[ParamVector]:
        probe = sega.gen_probe(self.config.seed * 100003 + round_, self.enc.d_in)
        reps = [sega.client_representation(theta, self.enc, probe) for theta in uploads]
        graph = sega.similarity_matrix(reps)
        parts = sega.greedy_minimize(graph)
        log_.similarity = graph.W
        log_.partition = parts
        log_.agg_weights = sega.aggregation_weights(parts, graph)
        return sega.aggregate_global(parts, graph, list(uploads))

    # -- rounds -----------------------------------------------------------

    def run_round(self, round_: int) -> RoundLog:
        strategy = self.config.strategy
        log_ = RoundLog(round=round_, strategy=strategy, metrics={})
        phase, client = "upload", None
        try:
            if strategy == "local":
                t0 = time.perf_counter()
                phase = "train"
                for c in self.clients:
                    client = c.id
                    log_.train_logs[c.id] = self._train(c, c.theta, None)
                log_.timings["train"] = time.perf_counter() - t0
                log_.bytes_per_client = {c.id: 0 for c in self.clients}
            else:
                t0 = time.perf_counter()
                uploads = [c.upload(round_) for c in self.clients]
                log_.timings["upload"] = time.perf_counter() - t0
                log_.bytes_per_client = {c.id: 2 * self.param_bytes for c in self.clients}

                phase, client, t0 = "server", None, time.perf_counter()
                if strategy == "dame" and self.config.use_sega:
                    globals_ = self.server_sega(uploads, round_, log_)
                else:
                    g = fedavg_aggregate(uploads, [c.n_train for c in self.clients])
                    globals_ = [g] * self.K
                log_.timings["server"] = time.perf_counter() - t0

                if strategy == "fedavg":
                    phase, t0 = "train", time.perf_counter()
                    for c, g in zip(self.clients, globals_):
                        client = c.id
                        log_.train_logs[c.id] = self._train(c, g.copy(), None)
                    log_.timings["train"] = time.perf_counter() - t0
                else:
                    self._dame_clients(round_, globals_, log_)
            phase, t0 = "evaluate", time.perf_counter()
            for c in self.clients:
                client = c.id
                log_.metrics[c.id] = self._evaluate(c)
            log_.timings["evaluate"] = time.perf_counter() - t0
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(round_, phase, client, exc) from exc
        return log_

    def _dame_clients(self, round_: int, globals_: Sequence[ParamVector], log_: RoundLog):
        t_bola = t_train = 0.0
        for c, g in zip(self.clients, globals_):
            t0 = time.perf_counter()
            try:
                if self.config.use_bola:
                    task = self._validation_task(c, round_)
                    res = bola.bola_search(c.theta, g, task, self.config.bola)
                    theta_tilde = res.theta
                    log_.lambdas[c.id] = res.lam
                    log_.bola_traces[c.id] = res.trace
                    log_.bola_best_scores[c.id] = res.score
                    log_.bola_local_scores[c.id] = next(
                        r.score for r in res.trace if r.lam == 1.0)
                else:
                    theta_tilde = g.copy()
                    log_.lambdas[c.id] = 0.0
            except Exception as exc:
                raise RoundError(round_, "bola", c.id, exc) from exc
            t1 = time.perf_counter()
            try:
                log_.train_logs[c.id] = self._train(c, theta_tilde, g)
            except Exception as exc:
                raise RoundError(round_, "train", c.id, exc) from exc
            t_bola += t1 - t0
            t_train += time.perf_counter() - t1
        log_.timings["bola"] = t_bola
        log_.timings["train"] = t_train

    def run(self, progress: bool = False) -> List[RoundLog]:
        logs = []
        for r in range(self.config.rounds):
            logs.append(self.run_round(r))
            if progress:
                m = np.mean([v["nmi"] for v in logs[-1].metrics.values()])
                log.info("%s round %d mean NMI %.4f", self.config.strategy, r, m)
        return logs


def _poison_dataset(ds: Dataset, rate: float, seed: int) -> Dataset:
    events = sorted({m.event_id for m in ds.messages})
    target = events[0]
    trigger = attacks.default_trigger(ds, seed)
    return attacks.poison_data(ds, rate, target, trigger, seed)


def run_experiment(config: ExperimentConfig, datasets: Sequence[Dataset],
                   progress: bool = False) -> List[RoundLog]:
    return Federation(config, datasets).run(progress=progress)
