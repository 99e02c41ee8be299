"""Bayesian-optimised local aggregation.

The client searches the interpolation weight ``lam`` in ``[alpha, 1]`` for
``lam * theta_local + (1 - lam) * theta_global`` that maximises validation
NMI.  A one-dimensional Gaussian process with a squared-exponential kernel
models the score; acquisitions alternate between expected improvement and
an upper confidence bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .data_model import Subgraph
from .encoder import EncoderConfig, ParamVector, forward
from .metrics import kmeans, nmi

log = logging.getLogger(__name__)

LENGTHSCALES = (0.05, 0.1, 0.2, 0.4)
NOISE_VAR = 1e-4
MAX_JITTER = 1e-6


class GPRError(RuntimeError):
    pass


@dataclass(frozen=True)
class BolaConfig:
    alpha: float = 0.5
    n_init: int = 4
    n_iter: int = 6
    grid: int = 101
    ucb_delta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n_init < 2:
            raise ValueError("n_init must be >= 2")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.grid < self.n_init + self.n_iter:
            raise ValueError("grid must hold at least n_init + n_iter distinct points")
        if not 0.0 < self.ucb_delta < 1.0:
            raise ValueError("ucb_delta must lie in (0, 1)")

    def candidates(self) -> np.ndarray:
        return np.linspace(self.alpha, 1.0, self.grid)


def interpolate(theta_l: ParamVector, theta_g: ParamVector, lam: float) -> ParamVector:
    """``lam * theta_l + (1 - lam) * theta_g``; exact at both endpoints."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    theta_l.check_compatible(theta_g)
    if lam == 1.0:
        return theta_l.copy()
    if lam == 0.0:
        return theta_g.copy()
    return theta_l.combine(theta_g, lam, 1.0 - lam)


# ---------------------------------------------------------------------------
# Gaussian process regression
# ---------------------------------------------------------------------------

@dataclass
class GPRState:
    xs: np.ndarray
    ys: np.ndarray
    lengthscale: float = 0.1
    signal_var: float = 1.0
    noise_var: float = NOISE_VAR
    mean: float = 0.0
    y_mean: float = 0.0
    y_scale: float = 1.0
    flat: bool = False
    log_likelihoods: dict = field(default_factory=dict)
    _chol: object = field(default=None, repr=False)
    _alpha: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def z(self) -> np.ndarray:
        """Standardised observations."""
        return (self.ys - self.y_mean) / self.y_scale


def se_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, signal_var: float = 1.0
              ) -> np.ndarray:
    d = np.subtract.outer(np.asarray(a, float), np.asarray(b, float))
    return signal_var * np.exp(-0.5 * (d / lengthscale) ** 2)


def _cholesky(K: np.ndarray):
    jitter = 0.0
    while True:
        try:
            return cho_factor(K + jitter * np.eye(K.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10
            if jitter > MAX_JITTER:
                raise GPRError("Gram matrix is not positive definite even with jitter")


def log_marginal_likelihood(xs, z, lengthscale, signal_var=1.0, noise_var=NOISE_VAR) -> float:
    K = se_kernel(xs, xs, lengthscale, signal_var) + noise_var * np.eye(len(xs))
    c, low = _cholesky(K)
    alpha = cho_solve((c, low), z)
    return float(-0.5 * z @ alpha - np.log(np.diag(c)).sum() - 0.5 * len(xs) * math.log(2 * math.pi))


def gpr_fit(xs: Sequence[float], ys: Sequence[float],
            lengthscales: Sequence[float] = LENGTHSCALES) -> GPRState:
    """Fit the GP on standardised scores, picking the lengthscale by exact
    marginal likelihood over a fixed grid."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise ValueError("need at least two (x, y) observations of equal count")
    y_mean = float(ys.mean())
    y_std = float(ys.std())
    if y_std == 0.0:
        return GPRState(xs, ys, signal_var=1e-12, mean=0.0, y_mean=y_mean,
                        y_scale=1.0, flat=True)
    z = (ys - y_mean) / y_std
    lls = {ell: log_marginal_likelihood(xs, z, ell) for ell in lengthscales}
    best = max(lengthscales, key=lambda ell: lls[ell])  # first wins ties
    state = GPRState(xs, ys, lengthscale=best, signal_var=1.0, y_mean=y_mean,
                     y_scale=y_std, log_likelihoods=lls)
    K = se_kernel(xs, xs, best) + NOISE_VAR * np.eye(xs.size)
    state._chol = _cholesky(K)
    state._alpha = cho_solve(state._chol, z)
    return state


def posterior(state: GPRState, candidates: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at ``candidates``, in score units."""
    cand = np.asarray(candidates, dtype=np.float64)
    if state.flat:
        return np.full(cand.shape, state.y_mean), np.zeros(cand.shape)
    Ks = se_kernel(state.xs, cand, state.lengthscale, state.signal_var)
    mu = state.mean + Ks.T @ state._alpha
    v = cho_solve(state._chol, Ks)
    var = state.signal_var - np.einsum("ij,ij->j", Ks, v)
    sigma = np.sqrt(np.maximum(var, 0.0))
    return state.y_mean + state.y_scale * mu, state.y_scale * sigma


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

def expected_improvement(mu, sigma, best_so_far) -> np.ndarray:
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    gain = mu - best_so_far
    out = np.maximum(gain, 0.0)
    pos = sigma > 0
    z = gain[pos] / sigma[pos]
    out[pos] = gain[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return out


def ucb_beta(t: int, n_candidates: int, delta: float = 0.1) -> float:
    if t < 1:
        raise ValueError("UCB iteration count starts at 1")
    return 2.0 * math.log(n_candidates * t * t * math.pi ** 2 / (6.0 * delta))


def _masked_argmax(score: np.ndarray, exclude) -> int:
    score = np.array(score, dtype=np.float64)
    if exclude is not None:
        score[np.asarray(exclude, bool)] = -np.inf
    return int(np.argmax(score))


def acquire_ei(mu, sigma, best_so_far, exclude=None) -> int:
    return _masked_argmax(expected_improvement(mu, sigma, best_so_far), exclude)


def acquire_ucb(mu, sigma, t: int, delta: float = 0.1, beta: Optional[float] = None,
                exclude=None) -> int:
    if beta is None:
        beta = ucb_beta(t, len(mu), delta)
    return _masked_argmax(np.asarray(mu) + math.sqrt(beta) * np.asarray(sigma), exclude)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    acquisition: str
    lam: float
    score: float


@dataclass
class BolaResult:
    lam: float
    theta: ParamVector
    score: float
    trace: List[TraceRow]


def design_indices(config: BolaConfig) -> List[int]:
    """Evenly spaced initial points (endpoints included), snapped to the grid."""
    raw = np.linspace(0, config.grid - 1, config.n_init)
    idx = list(dict.fromkeys(int(round(r)) for r in raw))
    return idx


def bola_search(theta_l: ParamVector, theta_g: ParamVector,
                objective: Callable[[ParamVector], float],
                config: BolaConfig = BolaConfig()) -> BolaResult:
    """Search ``lam`` on the candidate grid.

    ``objective`` scores an interpolated parameter vector (higher is
    better).  ``lam = 1`` (the untouched local model) is always part of the
    initial design, so the result never scores below it.
    """
    grid = config.candidates()
    visited = np.zeros(grid.size, dtype=bool)
    xs: List[float] = []
    ys: List[float] = []
    trace: List[TraceRow] = []
    failures = 0

    def evaluate(idx: int, it: int, how: str):
        nonlocal failures
        visited[idx] = True
        lam = float(grid[idx])
        try:
            score = float(objective(interpolate(theta_l, theta_g, lam)))
        except Exception:
            failures += 1
            log.exception("objective failed at lambda=%.4f", lam)
            return
        xs.append(lam)
        ys.append(score)
        trace.append(TraceRow(it, how, lam, score))

    for idx in design_indices(config):
        evaluate(idx, -1, "init")
    for it in range(config.n_iter):
        if len(xs) >= 2:
            state = gpr_fit(xs, ys)
            mu, sigma = posterior(state, grid)
            if it % 2 == 0:
                idx = acquire_ei(mu, sigma, max(ys), exclude=visited)
                how = "ei"
            else:
                idx = acquire_ucb(mu, sigma, it + 1, config.ucb_delta, exclude=visited)
                how = "ucb"
        else:
            idx, how = int(np.flatnonzero(~visited)[0]), "fallback"
        evaluate(idx, it, how)

    if not ys:
        raise RuntimeError(f"all {failures} objective evaluations failed")
    best = int(np.argmax(ys))  # first occurrence wins ties
    lam = xs[best]
    return BolaResult(lam=lam, theta=interpolate(theta_l, theta_g, lam),
                      score=ys[best], trace=trace)


# ---------------------------------------------------------------------------
# validation objective
# ---------------------------------------------------------------------------

@dataclass
class ValidationTask:
    """Scores a parameter vector by k-means NMI on a fixed validation subgraph.

    The subgraph and k-means seed are frozen at construction, so the score
    depends on the parameters alone.
    """

    config: EncoderConfig
    subgraph: Subgraph
    features: np.ndarray
    labels: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.k = len(np.unique(self.labels))
        if self.k < 2:
            raise ValueError("validation split needs at least two distinct events")

    def __call__(self, params: ParamVector) -> float:
        H = forward(params, self.config, self.subgraph, self.features).H
        return nmi(kmeans(H, self.k, seed=self.seed), self.labels)


def objective(theta_l: ParamVector, theta_g: ParamVector, lam: float,
              task: ValidationTask) -> float:
    return task(interpolate(theta_l, theta_g, lam))
