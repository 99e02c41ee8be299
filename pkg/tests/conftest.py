import numpy as np
import pytest

from dame.bola import BolaConfig
from dame.data_model import Message, SynthSpec, make_dataset, synthesize_clients
from dame.local_opt import TrainConfig

TINY_SPEC = SynthSpec(n_clients=3, events_per_client=4, messages_per_event=10,
                      text_dim=16, signal_dim=4, noise=1.0, p_in=0.2, p_out=0.01)
TINY_TRAIN = TrainConfig(batch_size=16, fanouts=(10, 5))
TINY_BOLA = BolaConfig(n_init=3, n_iter=2, grid=11)
TINY_ENCODER = dict(d_hidden=8, d_out=8, heads_l1=2)


@pytest.fixture(scope="session")
def tiny_datasets():
    return synthesize_clients(TINY_SPEC)


def make_message(i, user="u", hashtags=(), entities=(), event=0, dim=4, ts=43000.0):
    emb = np.full(dim, float(i))
    emb.setflags(write=False)
    return Message(id=f"m{i}", text_embedding=emb, timestamp=ts + i * 0.25, user=user,
                   hashtags=frozenset(hashtags), entities=frozenset(entities),
                   event_id=event)


@pytest.fixture
def small_dataset():
    msgs = [make_message(i, user=f"u{i}", event=i % 2) for i in range(10)]
    return make_dataset(msgs, seed=7, text_dim=4)
