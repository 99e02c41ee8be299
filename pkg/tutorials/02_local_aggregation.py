"""
Searching the interpolation weight
==================================

A client mixes its own parameters with the dispatched ones as
``lam * local + (1 - lam) * global`` and picks ``lam`` in ``[alpha, 1]``
with a one-dimensional Gaussian process.
"""

import numpy as np

from dame.bola import BolaConfig, bola_search, expected_improvement, gpr_fit, posterior
from dame.encoder import ParamVector

# a toy objective that peaks at lam = 0.72
layout = (("w", (1,)),)
local = ParamVector(np.array([1.0]), layout)
dispatched = ParamVector(np.array([0.0]), layout)


def score(theta):
    return float(np.exp(-40 * (theta.values[0] - 0.72) ** 2))


# four evenly spaced design points (both ends included), then six
# acquisitions alternating expected improvement and upper confidence bound
result = bola_search(local, dispatched, score, BolaConfig())
for row in result.trace:
    print(f"{row.acquisition:>5}  lam={row.lam:.3f}  score={row.score:.4f}")
print("chosen lam %.3f" % result.lam)

# lam = 1 is always evaluated, so the choice never scores below the local model
print("local score %.4f, chosen score %.4f" % (score(local), result.score))

# the posterior behind the last acquisition
xs = [r.lam for r in result.trace]
ys = [r.score for r in result.trace]
state = gpr_fit(xs, ys)
grid = np.linspace(0.5, 1.0, 11)
mu, sigma = posterior(state, grid)
ei = expected_improvement(mu, sigma, max(ys))
print("lengthscale", state.lengthscale)
for lam, m, s, e in zip(grid, mu, sigma, ei):
    print(f"lam={lam:.2f}  mean={m:.3f}  sd={s:.3f}  EI={e:.4f}")
