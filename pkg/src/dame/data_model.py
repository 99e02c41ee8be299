"""Message datasets, homogeneous message graphs and neighbourhood sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_TEXT_DIM = 384
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)  # train / test / val


class DatasetError(ValueError):
    """Raised when a dataset file or synthetic spec is invalid."""


@dataclass(frozen=True)
class Message:
    id: str
    text_embedding: np.ndarray
    timestamp: float
    user: str
    hashtags: frozenset
    entities: frozenset
    event_id: int

    def attributes(self) -> set:
        # case-folded, namespaced so a user "x" never matches a hashtag "x"
        attrs = {("u", self.user.casefold())} if self.user else set()
        attrs.update(("h", h.casefold()) for h in self.hashtags)
        attrs.update(("e", e.casefold()) for e in self.entities)
        return attrs


@dataclass
class Dataset:
    messages: List[Message]
    splits: Dict[str, np.ndarray]
    text_dim: int = DEFAULT_TEXT_DIM

    @property
    def num_events(self) -> int:
        return len({m.event_id for m in self.messages})

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.event_id for m in self.messages], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.messages)

    def to_records(self) -> List[dict]:
        return [_message_to_record(m) for m in self.messages]


@dataclass(frozen=True)
class MessageGraph:
    n: int
    edges: np.ndarray  # (m, 2) int, i < j, deduplicated
    features: np.ndarray
    labels: np.ndarray
    _adj: Tuple[np.ndarray, np.ndarray] = field(default=None, repr=False, compare=False)

    def adjacency(self) -> Tuple[np.ndarray, np.ndarray]:
        """CSR-style ``(indptr, indices)`` of the undirected graph."""
        if self._adj is None:
            src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
            dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
            order = np.lexsort((dst, src))
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(src, minlength=self.n), out=indptr[1:])
            object.__setattr__(self, "_adj", (indptr, dst[order]))
        return self._adj

    def neighbors(self, i: int) -> np.ndarray:
        indptr, indices = self.adjacency()
        return indices[indptr[i]:indptr[i + 1]]


@dataclass(frozen=True)
class Subgraph:
    """Two-hop sampled computation graph.

    ``nodes`` lists global node ids ordered as batch, then hop-1, then hop-2
    additions, so ``nodes[:n_out]`` are the output rows and
    ``nodes[:n_mid]`` the rows the first attention layer must produce.
    Edge arrays hold local (position-in-``nodes``) indices, message flowing
    from ``src`` to ``dst``; self loops are not included.
    """

    nodes: np.ndarray
    n_out: int
    n_mid: int
    edges_outer: Tuple[np.ndarray, np.ndarray]  # into batch nodes (both layers)
    edges_inner: Tuple[np.ndarray, np.ndarray]  # into hop-1 nodes (first layer only)

    @property
    def layers(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.nodes[:self.n_out], self.nodes[self.n_out:self.n_mid],
                self.nodes[self.n_mid:])

    def layer_edges(self, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        """Edges (src, dst) consumed by attention layer 1 or 2."""
        if layer == 2:
            return self.edges_outer
        src = np.concatenate([self.edges_outer[0], self.edges_inner[0]])
        dst = np.concatenate([self.edges_outer[1], self.edges_inner[1]])
        return src, dst


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_REQUIRED = ("id", "embedding", "timestamp", "user", "hashtags", "entities", "event_id")


def _message_to_record(m: Message) -> dict:
    return {
        "id": m.id,
        "embedding": [float(x) for x in m.text_embedding],
        "timestamp": float(m.timestamp),
        "user": m.user,
        "hashtags": sorted(m.hashtags),
        "entities": sorted(m.entities),
        "event_id": int(m.event_id),
    }


def _record_to_message(rec: dict, text_dim: int, where: str) -> Message:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise DatasetError(f"{where}: missing field(s) {', '.join(missing)}")
    emb = np.asarray(rec["embedding"], dtype=np.float64)
    if emb.ndim != 1 or emb.shape[0] != text_dim:
        raise DatasetError(
            f"{where}: embedding has length {emb.size}, expected {text_dim}")
    if not np.all(np.isfinite(emb)):
        raise DatasetError(f"{where}: embedding contains non-finite values")
    ts = float(rec["timestamp"])
    if not math.isfinite(ts):
        raise DatasetError(f"{where}: timestamp is not finite")
    event_id = rec["event_id"]
    if isinstance(event_id, bool) or not isinstance(event_id, int) or event_id < 0:
        raise DatasetError(f"{where}: event_id must be a non-negative integer")
    emb.setflags(write=False)
    return Message(
        id=str(rec["id"]), text_embedding=emb, timestamp=ts, user=str(rec["user"]),
        hashtags=frozenset(map(str, rec["hashtags"])),
        entities=frozenset(map(str, rec["entities"])), event_id=event_id)


def split_indices(n: int, seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS
                  ) -> Dict[str, np.ndarray]:
    """Random train/test/val split; val takes the remainder."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_test = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "test": np.sort(perm[n_train:n_train + n_test]),
        "val": np.sort(perm[n_train + n_test:]),
    }


def make_dataset(messages: List[Message], seed: int, text_dim: Optional[int] = None
                 ) -> Dataset:
    if text_dim is None:
        text_dim = messages[0].text_embedding.shape[0] if messages else DEFAULT_TEXT_DIM
    return Dataset(messages=list(messages), splits=split_indices(len(messages), seed),
                   text_dim=text_dim)


def load_dataset(path, seed: int = 0, text_dim: int = DEFAULT_TEXT_DIM) -> Dataset:
    """Read a JSON-lines message file.

    Every line is one record with fields ``id``, ``embedding``, ``timestamp``,
    ``user``, ``hashtags``, ``entities`` and ``event_id``.  Errors name the
    offending line.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    messages = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DatasetError(f"{where}: record is not an object")
        messages.append(_record_to_message(rec, text_dim, where))
    if not messages:
        raise DatasetError(f"{path}: no records")
    return make_dataset(messages, seed, text_dim)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in dataset.to_records():
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def temporal_embedding(timestamp: float) -> np.ndarray:
    """Split an OLE-date timestamp into (whole days, day fraction)."""
    if not math.isfinite(timestamp):
        raise ValueError(f"timestamp must be finite, got {timestamp!r}")
    day = math.floor(timestamp)
    return np.array([float(day), timestamp - day])


def _minmax(col: np.ndarray) -> np.ndarray:
    lo, hi = col.min(), col.max()
    if hi == lo:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)


def message_features(messages: Sequence[Message]) -> np.ndarray:
    text = np.stack([m.text_embedding for m in messages])
    temporal = np.stack([temporal_embedding(m.timestamp) for m in messages])
    temporal = np.column_stack([_minmax(temporal[:, 0]), _minmax(temporal[:, 1])])
    return np.hstack([text, temporal])


def shared_attribute_edges(messages: Sequence[Message]) -> np.ndarray:
    """Undirected message pairs that share at least one attribute value."""
    by_attr: Dict[tuple, List[int]] = {}
    for i, m in enumerate(messages):
        for a in m.attributes():
            by_attr.setdefault(a, []).append(i)
    pairs = set()
    for members in by_attr.values():
        if len(members) < 2:
            continue
        for x in range(len(members)):
            for y in range(x + 1, len(members)):
                pairs.add((members[x], members[y]))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def project_homogeneous(messages: Sequence[Message]) -> MessageGraph:
    """Collapse the message-attribute graph onto message nodes."""
    if len(messages) == 0:
        raise ValueError("cannot build a graph from an empty message list")
    widths = {m.text_embedding.shape[0] for m in messages}
    if len(widths) != 1:
        raise ValueError(f"messages have mixed embedding widths {sorted(widths)}")
    features = message_features(messages)
    features.setflags(write=False)
    labels = np.array([m.event_id for m in messages], dtype=np.int64)
    return MessageGraph(n=len(messages), edges=shared_attribute_edges(messages),
                        features=features, labels=labels)


def sample_neighborhood(graph: MessageGraph, batch: Iterable[int],
                        fanouts: Tuple[int, int] = (800, 100),
                        seed: Optional[int] = None) -> Subgraph:
    """Sample a two-hop computation graph around ``batch``.

    Each batch node keeps up to ``fanouts[0]`` uniformly chosen neighbours;
    each newly reached node keeps up to ``fanouts[1]`` of its neighbours that
    were not reached already.
    """
    f1, f2 = fanouts
    if f1 < 1 or f2 < 1:
        raise ValueError("fanouts must be >= 1")
    rng = np.random.default_rng(seed)
    batch = np.asarray(list(dict.fromkeys(int(b) for b in batch)), dtype=np.int64)
    if batch.size and (batch.min() < 0 or batch.max() >= graph.n):
        raise IndexError("batch node out of range")
    indptr, indices = graph.adjacency()

    pos = {int(v): i for i, v in enumerate(batch)}
    nodes = list(batch)

    def take(v: int, k: int, exclude=None) -> np.ndarray:
        nb = indices[indptr[v]:indptr[v + 1]]
        if exclude is not None:
            nb = nb[[int(u) not in exclude for u in nb]] if nb.size else nb
        if nb.size > k:
            nb = rng.choice(nb, size=k, replace=False)
        return nb

    o_src, o_dst = [], []
    for v in batch:
        for u in take(int(v), f1):
            u = int(u)
            if u not in pos:
                pos[u] = len(nodes)
                nodes.append(u)
            o_src.append(pos[u])
            o_dst.append(pos[int(v)])
    n_out = batch.size
    n_mid = len(nodes)

    reached = set(pos)
    i_src, i_dst = [], []
    for v in nodes[n_out:n_mid]:
        for u in take(int(v), f2, exclude=reached):
            u = int(u)
            if u not in pos:
                pos[u] = len(nodes)
                nodes.append(u)
            i_src.append(pos[u])
            i_dst.append(pos[int(v)])

    as_arr = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return Subgraph(nodes=as_arr(nodes), n_out=n_out, n_mid=n_mid,
                    edges_outer=(as_arr(o_src), as_arr(o_dst)),
                    edges_inner=(as_arr(i_src), as_arr(i_dst)))


# ---------------------------------------------------------------------------
# synthetic non-IID clients
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    n_clients: int = 6
    events_per_client: int = 20
    messages_per_event: int = 25
    text_dim: int = DEFAULT_TEXT_DIM
    overlap: float = 0.5
    shift: float = 0.5
    p_in: float = 0.08
    p_out: float = 0.002
    signal_dim: int = 16
    event_scale: float = 1.0
    noise: float = 3.0
    days_per_event: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise DatasetError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise DatasetError("need 0 <= p_out < p_in <= 1")
        if self.n_clients < 1 or self.events_per_client < 1 or self.messages_per_event < 1:
            raise DatasetError("client, event and message counts must be positive")
        if self.text_dim < 1 or not 1 <= self.signal_dim <= self.text_dim:
            raise DatasetError("need 1 <= signal_dim <= text_dim")
        if self.shift < 0 or self.noise < 0:
            raise DatasetError("shift and noise must be non-negative")


def _client_events(spec: SynthSpec, rng: np.random.Generator) -> List[np.ndarray]:
    e = spec.events_per_client
    n_shared = int(round(spec.overlap * e))
    shared = np.arange(n_shared)
    next_id = n_shared
    out = []
    for _ in range(spec.n_clients):
        own = np.arange(next_id, next_id + e - n_shared)
        next_id += e - n_shared
        out.append(np.concatenate([shared, own]))
    return out


def synthesize_clients(spec: SynthSpec) -> List[Dataset]:
    """Generate ``spec.n_clients`` labelled message datasets.

    Events are Gaussian clusters whose means live in a ``signal_dim``
    subspace shared by every client; each client adds its own offset of
    norm ``shift`` to every event mean.  Messages of the same event share an
    attribute token with probability ``p_in``, other pairs with ``p_out``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    events = _client_events(spec, rng)
    n_events = int(max(ev.max() for ev in events)) + 1
    basis, _ = np.linalg.qr(rng.standard_normal((spec.text_dim, spec.signal_dim)))
    means = spec.event_scale * rng.standard_normal((n_events, spec.signal_dim)) @ basis.T
    days = 43101.0 + rng.uniform(0, 365, size=n_events)  # 2018 in OLE days

    datasets = []
    for k, client_events in enumerate(events):
        offset = rng.standard_normal(spec.text_dim)
        offset *= spec.shift / max(np.linalg.norm(offset), 1e-12)
        labels = np.repeat(client_events, spec.messages_per_event)
        n = labels.size
        emb = (means[labels] + offset
               + spec.noise / math.sqrt(spec.text_dim)
               * rng.standard_normal((n, spec.text_dim)) * math.sqrt(spec.signal_dim))
        ts = days[labels] + rng.uniform(0, spec.days_per_event, size=n)

        same = labels[:, None] == labels[None, :]
        prob = np.where(same, spec.p_in, spec.p_out)
        draw = rng.random((n, n)) < prob
        iu, ju = np.nonzero(np.triu(draw, 1))
        use_tag = rng.random(iu.size) < 0.5
        hashtags: List[set] = [set() for _ in range(n)]
        entities: List[set] = [set() for _ in range(n)]
        for t, (i, j) in enumerate(zip(iu, ju)):
            token = f"c{k}l{t}"
            bucket = hashtags if use_tag[t] else entities
            bucket[i].add(token)
            bucket[j].add(token)

        messages = []
        for i in range(n):
            vec = np.round(emb[i], 10)
            vec.setflags(write=False)
            messages.append(Message(
                id=f"c{k}m{i}", text_embedding=vec, timestamp=round(float(ts[i]), 10),
                user=f"c{k}u{i}", hashtags=frozenset(hashtags[i]),
                entities=frozenset(entities[i]), event_id=int(labels[i])))
        datasets.append(make_dataset(messages, seed=spec.seed * 1000 + k,
                                     text_dim=spec.text_dim))
    return datasets
