"""Two-layer graph attention encoder in plain numpy.

Forward and backward passes are written out by hand; the backward pass is
checked against central finite differences in the test-suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data_model import Subgraph

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]

_MAGIC = b"PVEC"


class EncoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector with a named segment layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout",
                           tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout))
        if values.ndim != 1 or values.size != layout_size(self.layout):
            raise ValueError(
                f"vector of length {values.size} does not match layout size "
                f"{layout_size(self.layout)}")

    def __len__(self) -> int:
        return self.values.size

    def segments(self) -> Dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[off:off + size].reshape(shape)
            off += size
        return out

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def combine(self, other: "ParamVector", a: float, b: float) -> "ParamVector":
        """``a * self + b * other``."""
        self.check_compatible(other)
        return ParamVector(a * self.values + b * other.values, self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def to_bytes(self) -> bytes:
        header = json.dumps([[n, list(s)] for n, s in self.layout],
                            separators=(",", ":")).encode()
        return (_MAGIC + struct.pack("<I", len(header)) + header
                + self.values.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        if blob[:4] != _MAGIC:
            raise ValueError("not a serialized ParamVector")
        (hlen,) = struct.unpack("<I", blob[4:8])
        layout = tuple((n, tuple(s)) for n, s in json.loads(blob[8:8 + hlen]))
        values = np.frombuffer(blob[8 + hlen:], dtype="<f8").astype(np.float64)
        return cls(values, layout)


def layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout)


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if len(vectors) != len(weights) or not vectors:
        raise ValueError("need one weight per vector")
    first = vectors[0]
    for v in vectors[1:]:
        first.check_compatible(v)
    values = np.zeros_like(first.values)
    for v, w in zip(vectors, weights):
        values += float(w) * v.values
    return ParamVector(values, first.layout)


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int
    d_hidden: int = 64
    d_out: int = 64
    heads_l1: int = 4
    heads_l2: int = 1
    leaky_slope: float = 0.2
    margin: float = 3.0

    def __post_init__(self):
        if min(self.d_in, self.d_hidden, self.d_out, self.heads_l1, self.heads_l2) < 1:
            raise ValueError("encoder widths and head counts must be >= 1")
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")

    def layout(self) -> Layout:
        h1, f1 = self.heads_l1, self.d_hidden
        h2, f2 = self.heads_l2, self.d_out
        return (
            ("W1", (self.d_in, h1 * f1)),
            ("a1_src", (h1, f1)),
            ("a1_dst", (h1, f1)),
            ("b1", (h1 * f1,)),
            ("W2", (h1 * f1, h2 * f2)),
            ("a2_src", (h2, f2)),
            ("a2_dst", (h2, f2)),
            ("b2", (f2,)),
        )


@dataclass
class EmbeddingBatch:
    node_ids: np.ndarray
    H: np.ndarray


def init_params(config: EncoderConfig, seed: int) -> ParamVector:
    """Uniform initialisation with bound ``1 / sqrt(fan_in)``; zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in config.layout():
        if name.startswith("b"):
            parts.append(np.zeros(int(np.prod(shape))))
            continue
        fan_in = shape[0] if name.startswith("W") else shape[-1]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ParamVector(np.concatenate(parts), config.layout())


# ---------------------------------------------------------------------------
# attention layer
# ---------------------------------------------------------------------------

def _with_self_loops(src: np.ndarray, dst: np.ndarray, n_dst: int):
    loops = np.arange(n_dst, dtype=np.int64)
    src = np.concatenate([src, loops])
    dst = np.concatenate([dst, loops])
    order = np.argsort(dst, kind="stable")
    return src[order], dst[order]


def _segment_starts(dst: np.ndarray, n_dst: int) -> np.ndarray:
    # every destination owns at least its self loop
    return np.searchsorted(dst, np.arange(n_dst))


def _attention_forward(Z, W, a_src, a_dst, bias, src, dst, n_dst, slope):
    heads, width = a_src.shape
    P = (Z @ W).reshape(Z.shape[0], heads, width)
    s_src = np.einsum("nhf,hf->nh", P, a_src)
    s_dst = np.einsum("nhf,hf->nh", P[:n_dst], a_dst)
    e = s_src[src] + s_dst[dst]
    g = np.where(e > 0, e, slope * e)
    starts = _segment_starts(dst, n_dst)
    gmax = np.maximum.reduceat(g, starts, axis=0)
    ex = np.exp(g - gmax[dst])
    den = np.add.reduceat(ex, starts, axis=0)
    att = ex / den[dst]
    out = np.empty((n_dst, heads, width))
    for h in range(heads):
        out[:, h, :] = _scatter_rows(P[src, h, :] * att[:, h, None], starts)
    out = out.reshape(n_dst, heads * width)
    if bias is not None:
        out = out + bias
    cache = (Z, P, e, att, starts)
    return out, cache


def _scatter_rows(rows: np.ndarray, starts: np.ndarray) -> np.ndarray:
    return np.add.reduceat(rows, starts, axis=0)


def _attention_backward(dout, W, a_src, a_dst, src, dst, n_dst, slope, cache):
    Z, P, e, att, starts = cache
    heads, width = a_src.shape
    dout = dout.reshape(n_dst, heads, width)
    dbias = dout.sum(axis=0).reshape(-1)

    dP = np.zeros_like(P)
    datt = np.empty_like(att)
    for h in range(heads):
        dP[:, h, :] += _bincount_rows(src, att[:, h, None] * dout[dst, h, :], P.shape[0])
        datt[:, h] = np.einsum("ef,ef->e", dout[dst, h, :], P[src, h, :])
    weighted = np.add.reduceat(att * datt, starts, axis=0)
    dg = att * (datt - weighted[dst])
    de = np.where(e > 0, dg, slope * dg)
    ds_src = _bincount_rows(src, de, P.shape[0])
    ds_dst = _bincount_rows(dst, de, n_dst)

    da_src = np.einsum("nh,nhf->hf", ds_src, P)
    da_dst = np.einsum("nh,nhf->hf", ds_dst, P[:n_dst])
    dP += ds_src[:, :, None] * a_src[None]
    dP[:n_dst] += ds_dst[:, :, None] * a_dst[None]

    dP = dP.reshape(P.shape[0], heads * width)
    dW = Z.T @ dP
    dZ = dP @ W.T
    return dZ, dW, da_src, da_dst, dbias


def _bincount_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Row-wise scatter-add of ``rows`` into ``n`` buckets."""
    out = np.zeros((n, rows.shape[1]))
    order = np.argsort(index, kind="stable")
    uniq, starts = np.unique(index[order], return_index=True)
    out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------

@dataclass
class _ForwardCache:
    l1: tuple
    l2: tuple
    pre1: np.ndarray
    edges1: tuple
    edges2: tuple
    n_mid: int
    n_out: int


def forward_cached(params: ParamVector, config: EncoderConfig, subgraph: Subgraph,
                   features: np.ndarray):
    p = params.segments()
    X = features[subgraph.nodes]
    n_mid, n_out = subgraph.n_mid, subgraph.n_out
    slope = config.leaky_slope

    s1, d1 = subgraph.layer_edges(1)
    s1, d1 = _with_self_loops(s1, d1, n_mid)
    pre1, c1 = _attention_forward(X, p["W1"], p["a1_src"], p["a1_dst"], p["b1"],
                                  s1, d1, n_mid, slope)
    if not np.all(np.isfinite(pre1)):
        raise EncoderError("non-finite activation in attention layer 1")
    Z2 = _elu(pre1)

    s2, d2 = subgraph.layer_edges(2)
    s2, d2 = _with_self_loops(s2, d2, n_out)
    H, c2 = _attention_forward(Z2, p["W2"], p["a2_src"], p["a2_dst"], None,
                               s2, d2, n_out, slope)
    H = H.reshape(n_out, config.heads_l2, config.d_out).mean(axis=1) + p["b2"]
    if not np.all(np.isfinite(H)):
        raise EncoderError("non-finite activation in attention layer 2")
    return H, _ForwardCache(c1, c2, pre1, (s1, d1), (s2, d2), n_mid, n_out)


def forward(params: ParamVector, config: EncoderConfig, subgraph: Subgraph,
            features: np.ndarray) -> EmbeddingBatch:
    """Embed the batch nodes of ``subgraph``.

    Layer 1 concatenates ``heads_l1`` heads and applies ELU; layer 2 averages
    ``heads_l2`` heads.  Every node also attends to itself.
    """
    H, _ = forward_cached(params, config, subgraph, features)
    return EmbeddingBatch(node_ids=subgraph.nodes[:subgraph.n_out], H=H)


def attention_weights(params: ParamVector, config: EncoderConfig, subgraph: Subgraph,
                      features: np.ndarray, layer: int = 1):
    """Per-edge attention coefficients ``(src, dst, att)`` of one layer."""
    _, cache = forward_cached(params, config, subgraph, features)
    src, dst = cache.edges1 if layer == 1 else cache.edges2
    att = (cache.l1 if layer == 1 else cache.l2)[3]
    return src, dst, att


def backprop(params: ParamVector, config: EncoderConfig, cache: _ForwardCache,
             dH: np.ndarray) -> ParamVector:
    p = params.segments()
    slope = config.leaky_slope
    grads: Dict[str, np.ndarray] = {"b2": dH.sum(axis=0)}
    h2 = config.heads_l2
    dout2 = np.repeat(dH[:, None, :] / h2, h2, axis=1).reshape(cache.n_out, -1)
    s2, d2 = cache.edges2
    dZ2, grads["W2"], grads["a2_src"], grads["a2_dst"], _ = _attention_backward(
        dout2, p["W2"], p["a2_src"], p["a2_dst"], s2, d2, cache.n_out, slope, cache.l2)
    pre1 = cache.pre1
    dpre1 = dZ2 * np.where(pre1 > 0, 1.0, np.exp(np.minimum(pre1, 0)))
    s1, d1 = cache.edges1
    _, grads["W1"], grads["a1_src"], grads["a1_dst"], grads["b1"] = _attention_backward(
        dpre1, p["W1"], p["a1_src"], p["a1_dst"], s1, d1, cache.n_mid, slope, cache.l1)
    flat = np.concatenate([grads[name].reshape(-1) for name, _ in params.layout])
    return params.with_values(flat)


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------

def _pairwise_dist(H: np.ndarray) -> np.ndarray:
    sq = np.sum(H * H, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * H @ H.T, 0.0)
    return np.sqrt(d2)


def mine_triplets(H: np.ndarray, labels: np.ndarray, rng: np.random.Generator
                  ) -> np.ndarray:
    """One random positive and one semi-hard negative per usable anchor.

    Semi-hard means the closest negative that is still farther from the
    anchor than the positive; if none exists a random negative is used.
    Returns an ``(m, 3)`` array of row indices.
    """
    labels = np.asarray(labels)
    counts = dict(zip(*np.unique(labels, return_counts=True)))
    if sum(1 for c in counts.values() if c >= 2) < 1 or len(counts) < 2:
        return np.zeros((0, 3), dtype=np.int64)
    D = _pairwise_dist(H)
    triplets = []
    for a in range(labels.size):
        if counts[labels[a]] < 2:
            continue
        same = labels == labels[a]
        pos = np.flatnonzero(same)
        pos = pos[pos != a]
        neg = np.flatnonzero(~same)
        p = int(rng.choice(pos))
        farther = neg[D[a, neg] > D[a, p]]
        if farther.size:
            n = int(farther[np.argmin(D[a, farther])])
        else:
            n = int(rng.choice(neg))
        triplets.append((a, p, n))
    return np.array(triplets, dtype=np.int64).reshape(-1, 3)


def triplet_terms(H: np.ndarray, triplets: np.ndarray, margin: float):
    a, p, n = triplets.T
    d_ap = np.linalg.norm(H[a] - H[p], axis=1)
    d_an = np.linalg.norm(H[a] - H[n], axis=1)
    return d_ap, d_an, np.maximum(d_ap - d_an + margin, 0.0)


def triplet_value(H: np.ndarray, triplets: np.ndarray, margin: float) -> float:
    if len(triplets) == 0:
        return 0.0
    return float(triplet_terms(H, triplets, margin)[2].mean())


def triplet_loss(batch: EmbeddingBatch, labels, margin: float = 3.0,
                 rng: Optional[np.random.Generator] = None,
                 triplets: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean hinge ``max(D(a,p) - D(a,n) + margin, 0)`` over mined triplets."""
    if triplets is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        triplets = mine_triplets(batch.H, labels, rng)
    return triplet_value(batch.H, triplets, margin), triplets


def _unit_rows(diff: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)


def triplet_grad(H: np.ndarray, triplets: np.ndarray, margin: float) -> np.ndarray:
    dH = np.zeros_like(H)
    if len(triplets) == 0:
        return dH
    a, p, n = triplets.T
    _, _, terms = triplet_terms(H, triplets, margin)
    active = terms > 0
    if not active.any():
        return dH
    a, p, n = a[active], p[active], n[active]
    scale = 1.0 / len(triplets)
    u_ap = _unit_rows(H[a] - H[p]) * scale
    u_an = _unit_rows(H[a] - H[n]) * scale
    np.add.at(dH, a, u_ap - u_an)
    np.add.at(dH, p, -u_ap)
    np.add.at(dH, n, u_an)
    return dH


# ---------------------------------------------------------------------------
# event-centric alignment term (value + gradient w.r.t. the local rows)
# ---------------------------------------------------------------------------

def centroids(H: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-event mean rows, ascending event id; also returns the inverse map."""
    events, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    C = np.zeros((events.size, H.shape[1]))
    np.add.at(C, inverse, H)
    C /= counts[:, None]
    return events, C, inverse


def centroid_distance(H_local: np.ndarray, C_global: np.ndarray, labels: np.ndarray
                      ) -> Tuple[float, np.ndarray]:
    """Mean Euclidean distance between local and fixed global centroids, and
    its gradient with respect to ``H_local``."""
    events, C_local, inverse = centroids(H_local, labels)
    diff = C_local - C_global
    dist = np.linalg.norm(diff, axis=1)
    value = float(dist.mean())
    counts = np.bincount(inverse, minlength=events.size)
    dC = _unit_rows(diff) / events.size
    dH = dC[inverse] / counts[inverse, None]
    return value, dH


# ---------------------------------------------------------------------------
# gradient entry point
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    total: float
    triplet: float
    glecc: float = 0.0
    triplets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    H: Optional[np.ndarray] = None


def loss_and_grad(params: ParamVector, config: EncoderConfig, subgraph: Subgraph,
                  features: np.ndarray, labels: np.ndarray,
                  triplets: Optional[np.ndarray] = None,
                  rng: Optional[np.random.Generator] = None,
                  glecc_centroids: Optional[np.ndarray] = None,
                  glecc_weight: float = 0.0) -> Tuple[LossParts, ParamVector]:
    """Triplet loss (plus optionally ``glecc_weight`` times the centroid
    alignment term against fixed global centroids) and its exact gradient."""
    H, cache = forward_cached(params, config, subgraph, features)
    labels = np.asarray(labels)
    if triplets is None:
        triplets = mine_triplets(H, labels, rng if rng is not None else np.random.default_rng(0))
    trip = triplet_value(H, triplets, config.margin)
    dH = triplet_grad(H, triplets, config.margin)
    glecc = 0.0
    if glecc_centroids is not None:
        glecc, dG = centroid_distance(H, glecc_centroids, labels)
        if glecc_weight:
            dH = dH + glecc_weight * dG
    total = trip + glecc_weight * glecc
    grad = backprop(params, config, cache, dH)
    return LossParts(total, trip, glecc, triplets, H), grad


def backward(params: ParamVector, config: EncoderConfig, subgraph: Subgraph,
             features: np.ndarray, labels, triplets: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None,
             glecc_centroids: Optional[np.ndarray] = None,
             glecc_weight: float = 0.0) -> Tuple[float, ParamVector]:
    parts, grad = loss_and_grad(params, config, subgraph, features, np.asarray(labels),
                                triplets=triplets, rng=rng,
                                glecc_centroids=glecc_centroids, glecc_weight=glecc_weight)
    return parts.total, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[ParamVector, AdamState]:
    params.check_compatible(grad)
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise EncoderError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(new), AdamState(m, v, t)
