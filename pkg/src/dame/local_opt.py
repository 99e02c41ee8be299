"""Client-side training: triplet loss plus the gated event-centric alignment
term against a frozen global model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_model import MessageGraph, sample_neighborhood
from .encoder import (AdamState, EmbeddingBatch, EncoderConfig, ParamVector, adam_step,
                      backprop, centroid_distance, centroids, forward, forward_cached,
                      mine_triplets, triplet_grad, triplet_value)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    fanouts: Tuple[int, int] = (800, 100)
    glecc: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EventCentroids:
    event_ids: np.ndarray
    H_e: np.ndarray


@dataclass
class BatchLog:
    batch: int
    loss_local: float
    loss_global: float
    gate: float
    glecc: float
    total: float


def event_representation(batch: EmbeddingBatch, labels) -> EventCentroids:
    if batch.H.shape[0] == 0:
        raise ValueError("empty batch")
    events, C, _ = centroids(batch.H, np.asarray(labels))
    return EventCentroids(event_ids=events, H_e=C)


def glecc_loss(global_batch: EmbeddingBatch, local_batch: EmbeddingBatch, labels) -> float:
    """Mean Euclidean distance between matching global and local event centroids."""
    if not np.array_equal(global_batch.node_ids, local_batch.node_ids):
        raise ValueError("global and local batches cover different nodes")
    g = event_representation(global_batch, labels)
    value, _ = centroid_distance(local_batch.H, g.H_e, np.asarray(labels))
    return value


def glecc_gate(loss_local: float, loss_global: float) -> float:
    """1 when the global model is at least as good on this batch, else
    ``exp(loss_local - loss_global)``."""
    return math.exp(min(loss_local - loss_global, 0.0))


def embed(params: ParamVector, config: EncoderConfig, graph: MessageGraph,
          nodes: Sequence[int], fanouts: Tuple[int, int], seed: int) -> np.ndarray:
    sub = sample_neighborhood(graph, nodes, fanouts, seed=seed)
    return forward(params, config, sub, graph.features).H


def local_train_epoch(theta: ParamVector, config: EncoderConfig, graph: MessageGraph,
                      train_idx: np.ndarray, adam: AdamState, rng: np.random.Generator,
                      train: TrainConfig = TrainConfig(),
                      theta_global: Optional[ParamVector] = None,
                      ) -> Tuple[ParamVector, AdamState, List[BatchLog]]:
    """One pass over ``train_idx`` in shuffled mini-batches, one Adam step each.

    With ``theta_global`` given (and ``train.glecc`` on) every batch adds
    ``gate * glecc`` to the local triplet loss, where the gate compares the
    local and global triplet losses on the same triplets and is held
    constant during that batch's backward pass.  ``theta_global`` is never
    modified.
    """
    order = rng.permutation(np.asarray(train_idx))
    logs = []
    use_global = theta_global is not None and train.glecc
    for b, start in enumerate(range(0, order.size, train.batch_size)):
        batch = np.sort(order[start:start + train.batch_size])
        sub = sample_neighborhood(graph, batch, train.fanouts,
                                  seed=int(rng.integers(2**31)))
        labels = graph.labels[sub.nodes[:sub.n_out]]
        H, cache = forward_cached(theta, config, sub, graph.features)
        triplets = mine_triplets(H, labels, rng)
        loss_local = triplet_value(H, triplets, config.margin)
        dH = triplet_grad(H, triplets, config.margin)
        loss_global, gate, glecc = float("nan"), 0.0, 0.0
        if use_global:
            Hg = forward(theta_global, config, sub, graph.features).H
            loss_global = triplet_value(Hg, triplets, config.margin)
            gate = glecc_gate(loss_local, loss_global)
            _, Cg, _ = centroids(Hg, labels)
            glecc, dG = centroid_distance(H, Cg, labels)
            dH = dH + gate * dG
        grad = backprop(theta, config, cache, dH)
        theta, adam = adam_step(theta, grad, adam, train.lr)
        logs.append(BatchLog(b, loss_local, loss_global, gate, glecc,
                             loss_local + gate * glecc))
    return theta, adam, logs
