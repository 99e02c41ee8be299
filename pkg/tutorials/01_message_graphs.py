"""
Message graphs and the attention encoder
========================================

Generate a few synthetic clients, turn one client's messages into a graph
and embed a mini-batch with the two-layer attention encoder.
"""

import numpy as np

from dame.data_model import SynthSpec, project_homogeneous, sample_neighborhood, synthesize_clients
from dame.encoder import EmbeddingBatch, EncoderConfig, forward, init_params, triplet_loss

# three small clients; each message carries a text vector, a timestamp, a
# user, hashtags and entities
spec = SynthSpec(n_clients=3, events_per_client=5, messages_per_event=12, text_dim=32,
                 signal_dim=8)
clients = synthesize_clients(spec)
ds = clients[0]
print(len(ds), "messages,", ds.num_events, "events, splits",
      {k: v.size for k, v in ds.splits.items()})

# two messages are linked when they share any user, hashtag or entity
graph = project_homogeneous(ds.messages)
same_event = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
print(len(graph.edges), "edges, share inside one event: %.2f" % same_event.mean())

# node features: text vector followed by the two time components
print("feature width", graph.features.shape[1])

# sample a two-hop neighbourhood around a training batch and embed it
batch = ds.splits["train"][:16]
sub = sample_neighborhood(graph, batch, fanouts=(20, 10), seed=0)
cfg = EncoderConfig(d_in=graph.features.shape[1])
theta = init_params(cfg, seed=0)
H = forward(theta, cfg, sub, graph.features).H
print("embeddings", H.shape, "parameters", len(theta))

# triplet loss with semi-hard negatives on those embeddings
loss, triplets = triplet_loss(EmbeddingBatch(sub.nodes[:sub.n_out], H),
                              graph.labels[sub.nodes[:sub.n_out]], rng=np.random.default_rng(0))
print("triplets", len(triplets), "loss %.3f" % loss)
