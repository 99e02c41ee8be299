"""Server-side personalised aggregation by structural-entropy partitioning.

All uploaded models embed one shared random probe graph; cosine similarity
of their mean-pooled outputs weights a complete client graph.  Greedily
merging client groups while the two-dimensional structural entropy drops
yields a partition, and each client receives a softmax-weighted average of
the models in its own group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .data_model import MessageGraph, sample_neighborhood
from .encoder import EncoderConfig, ParamVector, forward, weighted_sum

EPS_WEIGHT = 1e-6
PROBE_BLOCKS = 2
PROBE_BLOCK_SIZE = 16
PROBE_P_IN = 0.5
PROBE_P_OUT = 0.05


@dataclass(frozen=True)
class ProbeGraph:
    graph: MessageGraph
    blocks: np.ndarray
    seed: int

    @property
    def features(self) -> np.ndarray:
        return self.graph.features


@dataclass(frozen=True)
class ClientGraph:
    W: np.ndarray
    W_pos: np.ndarray

    @property
    def K(self) -> int:
        return self.W.shape[0]

    def degrees(self) -> np.ndarray:
        return self.W_pos.sum(axis=1)  # diagonal of W_pos is zero


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = [0]
    while frontier:
        nxt = np.flatnonzero(adj[frontier].any(axis=0) & ~seen)
        seen[nxt] = True
        frontier = list(nxt)
    return bool(seen.all())


def gen_probe(seed: int, d_in: int, blocks: int = PROBE_BLOCKS,
              block_size: int = PROBE_BLOCK_SIZE, p_in: float = PROBE_P_IN,
              p_out: float = PROBE_P_OUT) -> ProbeGraph:
    """Stochastic block model probe with standard-normal node features.

    Blocks are redrawn until each is internally connected.
    """
    rng = np.random.default_rng(seed)
    n = blocks * block_size
    membership = np.repeat(np.arange(blocks), block_size)
    same = membership[:, None] == membership[None, :]
    while True:
        upper = np.triu(rng.random((n, n)) < np.where(same, p_in, p_out), 1)
        adj = upper | upper.T
        if all(_connected(adj[np.ix_(membership == b, membership == b)])
               for b in range(blocks)):
            break
    features = rng.standard_normal((n, d_in))
    features.setflags(write=False)
    edges = np.argwhere(upper).astype(np.int64)
    graph = MessageGraph(n=n, edges=edges, features=features, labels=membership)
    return ProbeGraph(graph=graph, blocks=membership, seed=seed)


def client_representation(params: ParamVector, config: EncoderConfig,
                          probe: ProbeGraph) -> np.ndarray:
    """Mean of the encoder's node embeddings over the whole probe graph."""
    n = probe.graph.n
    sub = sample_neighborhood(probe.graph, range(n), fanouts=(n, n), seed=probe.seed)
    return forward(params, config, sub, probe.features).H.mean(axis=0)


def similarity_matrix(reps: Sequence[np.ndarray]) -> ClientGraph:
    R = np.asarray([np.asarray(r, dtype=np.float64) for r in reps])
    norms = np.linalg.norm(R, axis=1)
    for k, nrm in enumerate(norms):
        if nrm == 0 or not np.isfinite(nrm):
            raise ValueError(f"client {k} has a zero-norm representation")
    U = R / norms[:, None]
    W = np.clip(U @ U.T, -1.0, 1.0)
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 1.0)
    W_pos = np.maximum(W, EPS_WEIGHT)
    np.fill_diagonal(W_pos, 0.0)
    return ClientGraph(W=W, W_pos=W_pos)


def client_graph_from_weights(W: np.ndarray) -> ClientGraph:
    """Build a client graph directly from a symmetric similarity matrix."""
    W = np.array(W, dtype=np.float64)
    if W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
        raise ValueError("similarity matrix must be square and symmetric")
    np.fill_diagonal(W, 1.0)
    W_pos = np.maximum(W, EPS_WEIGHT)
    np.fill_diagonal(W_pos, 0.0)
    return ClientGraph(W=W, W_pos=W_pos)


# ---------------------------------------------------------------------------
# structural entropy
# ---------------------------------------------------------------------------

def _check_cover(parts: Sequence[Sequence[int]], K: int) -> None:
    flat = sorted(i for p in parts for i in p)
    if flat != list(range(K)) or any(len(p) == 0 for p in parts):
        raise ValueError("partitions must be non-empty and cover every client exactly once")


def partition_entropy(graph: ClientGraph, part: Sequence[int]) -> float:
    """Entropy contribution of one group: within-group and cut terms."""
    d = graph.degrees()
    vol_g = d.sum()
    idx = np.asarray(list(part), dtype=np.int64)
    if np.any(d[idx] <= 0):
        raise ValueError("structural entropy needs positive node degrees")
    vol_x = d[idx].sum()
    inside = np.zeros(graph.K, dtype=bool)
    inside[idx] = True
    cut = graph.W_pos[np.ix_(inside, ~inside)].sum()
    h = -np.sum(d[idx] / vol_g * np.log2(d[idx] / vol_x))
    if cut > 0:
        h -= cut / vol_g * np.log2(vol_x / vol_g)
    return float(h)


def structural_entropy_2d(graph: ClientGraph, parts: Sequence[Sequence[int]]) -> float:
    _check_cover(parts, graph.K)
    return float(sum(partition_entropy(graph, p) for p in parts))


def delta_se(graph: ClientGraph, parts: Sequence[Sequence[int]], i: int, j: int) -> float:
    """Entropy change from merging groups ``i`` and ``j``; touches only those two."""
    if i == j:
        raise ValueError("cannot merge a partition with itself")
    merged = list(parts[i]) + list(parts[j])
    return (partition_entropy(graph, merged) - partition_entropy(graph, parts[i])
            - partition_entropy(graph, parts[j]))


def adjacent(graph: ClientGraph, a: Sequence[int], b: Sequence[int]) -> bool:
    """True when some pair across the two groups has positive similarity.

    Clamped weights only keep the entropy finite; they are not edges.
    """
    return bool((graph.W[np.ix_(list(a), list(b))] > 0).any())


def greedy_minimize(graph: ClientGraph) -> List[List[int]]:
    """Merge the adjacent pair with the most negative entropy change until
    none is negative."""
    parts: List[List[int]] = [[k] for k in range(graph.K)]
    if graph.K < 2:
        return parts
    while len(parts) > 1:
        best, best_pair = 0.0, None
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                if not adjacent(graph, parts[i], parts[j]):
                    continue
                d = delta_se(graph, parts, i, j)
                if d < best:
                    best, best_pair = d, (i, j)
        if best_pair is None:
            break
        i, j = best_pair
        parts[i] = sorted(parts[i] + parts[j])
        del parts[j]
    return parts


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregation_weights(parts: Sequence[Sequence[int]], graph: ClientGraph) -> np.ndarray:
    """K x K matrix; row u is the softmax of sim(u, .) over u's own group."""
    _check_cover(parts, graph.K)
    A = np.zeros((graph.K, graph.K))
    for part in parts:
        idx = np.asarray(part, dtype=np.int64)
        for u in idx:
            logits = graph.W[u, idx]
            w = np.exp(logits - logits.max())
            A[u, idx] = w / w.sum()
    return A


def aggregate_global(parts: Sequence[Sequence[int]], graph: ClientGraph,
                     locals_: Sequence[ParamVector]) -> List[ParamVector]:
    if len(locals_) != graph.K:
        raise ValueError("need one local model per client")
    for v in locals_[1:]:
        locals_[0].check_compatible(v)
    A = aggregation_weights(parts, graph)
    out = []
    for u in range(graph.K):
        members = np.flatnonzero(A[u])
        if members.size == 1:
            out.append(locals_[u].copy())
        else:
            out.append(weighted_sum([locals_[v] for v in members], A[u, members]))
    return out
