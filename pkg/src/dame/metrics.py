"""k-means clustering and NMI / AMI / ARI scores."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln


def kmeans(points: np.ndarray, k: int, seed: int = 0, n_init: int = 10,
           max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts."""
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    sq = np.einsum("ij,ij->i", X, X)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        labels, inertia = _lloyd(X, sq, _plusplus(X, sq, k, rng), max_iter, tol)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def inertia(points: np.ndarray, labels: np.ndarray) -> float:
    X = np.asarray(points, dtype=np.float64)
    total = 0.0
    for c in np.unique(labels):
        member = X[labels == c]
        total += float(((member - member.mean(axis=0)) ** 2).sum())
    return total


def _sqdist(X, sq, C):
    return np.maximum(sq[:, None] - 2.0 * X @ C.T + np.einsum("ij,ij->i", C, C)[None, :], 0.0)


def _plusplus(X, sq, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sqdist(X, sq, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sqdist(X, sq, X[idx:idx + 1])[:, 0])
    return np.array(centers)


def _lloyd(X, sq, C, max_iter, tol):
    k = C.shape[0]
    for _ in range(max_iter):
        D = _sqdist(X, sq, C)
        labels = np.argmin(D, axis=1)
        onehot = np.zeros((X.shape[0], k))
        onehot[np.arange(X.shape[0]), labels] = 1.0
        counts = onehot.sum(axis=0)
        newC = onehot.T @ X
        empty = counts == 0
        newC[~empty] /= counts[~empty, None]
        if empty.any():
            # re-seed empty clusters at the points worst served by their centre
            far = np.argsort(-D[np.arange(X.shape[0]), labels])
            newC[empty] = X[far[:empty.sum()]]
        shift = float(((newC - C) ** 2).sum())
        C = newC
        if shift <= tol:
            break
    D = _sqdist(X, sq, C)
    labels = np.argmin(D, axis=1)
    return labels, float(D[np.arange(X.shape[0]), labels].sum())


# ---------------------------------------------------------------------------
# clustering agreement
# ---------------------------------------------------------------------------

def contingency(pred, true) -> np.ndarray:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"label arrays differ in length: {pred.size} vs {true.size}")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(table: np.ndarray) -> float:
    n = table.sum()
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    nij = table[nz]
    outer = (a * b)[nz]
    return float(np.sum(nij / n * (np.log(nij) + np.log(n) - np.log(outer))))


def nmi(pred, true) -> float:
    """Mutual information normalised by the geometric mean of the entropies."""
    table = contingency(pred, true)
    r, c = table.shape
    if r == 1 and c == 1:
        return 1.0
    if r == 1 or c == 1:
        return 0.0
    hu, hv = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    return float(min(max(mutual_info(table) / np.sqrt(hu * hv), 0.0), 1.0))


def expected_mutual_info(table: np.ndarray) -> float:
    """E[MI] under the hypergeometric (fixed-marginals permutation) model."""
    n = int(table.sum())
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    lg = gammaln(np.arange(n + 1) + 1.0)  # log k!
    total = 0.0
    for ai in a:
        for bj in b:
            lo, hi = max(1, ai + bj - n), min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1)
            term = nij / n * (np.log(n * nij) - np.log(ai * bj))
            logp = (lg[ai] + lg[bj] + lg[n - ai] + lg[n - bj] - lg[n] - lg[nij]
                    - lg[ai - nij] - lg[bj - nij] - lg[n - ai - bj + nij])
            total += float(np.sum(term * np.exp(logp)))
    return total


def ami(pred, true) -> float:
    """Adjusted mutual information with arithmetic-mean normalisation."""
    table = contingency(pred, true)
    r, c = table.shape
    n = table.sum()
    if (r == c == 1) or (r == c == n):
        return 1.0
    mi = mutual_info(table)
    emi = expected_mutual_info(table)
    hu, hv = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    denom = 0.5 * (hu + hv) - emi
    if abs(denom) < np.finfo(float).eps:
        denom = np.copysign(np.finfo(float).eps, denom) if denom else np.finfo(float).eps
    return float((mi - emi) / denom)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred, true) -> float:
    """Adjusted Rand index from pair counts of the contingency table."""
    table = contingency(pred, true)
    n = table.sum()
    index = _comb2(table).sum()
    sa = _comb2(table.sum(axis=1)).sum()
    sb = _comb2(table.sum(axis=0)).sum()
    expected = sa * sb / _comb2(n) if n > 1 else 0.0
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def score_all(pred, true) -> dict:
    return {"nmi": nmi(pred, true), "ami": ami(pred, true), "ari": ari(pred, true)}


def cluster_scores(embeddings: np.ndarray, labels: np.ndarray, seed: int = 0) -> dict:
    """k-means with k = number of distinct labels, then NMI/AMI/ARI."""
    k = len(np.unique(labels))
    if k < 2:
        raise ValueError("need at least two distinct events to score a clustering")
    pred = kmeans(embeddings, k, seed=seed)
    return score_all(pred, labels)
