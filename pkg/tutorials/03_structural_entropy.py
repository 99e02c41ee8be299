"""
Partitioning clients by structural entropy
==========================================

The server compares uploaded models on a shared random probe graph,
partitions the resulting similarity graph and averages models inside each
group only.
"""

import numpy as np

from dame.attacks import poison_model
from dame.encoder import EncoderConfig, init_params
from dame.sega import (aggregation_weights, client_graph_from_weights, client_representation,
                       gen_probe, greedy_minimize, similarity_matrix, structural_entropy_2d)

# two tight groups of three clients joined by one weak link
W = np.zeros((6, 6))
W[:3, :3] = W[3:, 3:] = 0.9
W[2, 3] = W[3, 2] = 0.1
graph = client_graph_from_weights(W)
parts = greedy_minimize(graph)
print("partition", parts)
print("entropy: singletons %.3f, greedy %.3f, one group %.3f" % (
    structural_entropy_2d(graph, [[k] for k in range(6)]),
    structural_entropy_2d(graph, parts),
    structural_entropy_2d(graph, [list(range(6))])))

# each client averages its own group with softmax weights on similarity
print(np.round(aggregation_weights(parts, graph), 3))

# real models: five perturbed copies of one model and one noise upload
cfg = EncoderConfig(d_in=10, d_hidden=16, d_out=16)
base = init_params(cfg, seed=0)
rng = np.random.default_rng(1)
uploads = [base.with_values(base.values + 0.02 * rng.standard_normal(len(base)))
           for _ in range(5)]
uploads.append(poison_model(base, seed=7))

probe = gen_probe(seed=0, d_in=cfg.d_in)
reps = [client_representation(theta, cfg, probe) for theta in uploads]
sims = similarity_matrix(reps)
print(np.round(sims.W, 2))
# the noise upload is clearly the least similar client, yet its
# similarities stay positive, so merging it into a group still lowers the
# entropy and it is usually not left on its own
print("partition with a noise upload", greedy_minimize(sims))
