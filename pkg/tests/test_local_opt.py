import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dame.data_model import project_homogeneous
from dame.encoder import AdamState, EmbeddingBatch, EncoderConfig, init_params
from dame.local_opt import (TrainConfig, event_representation, glecc_gate, glecc_loss,
                            local_train_epoch)

from conftest import TINY_ENCODER, TINY_TRAIN


def _batch(H, ids=None):
    H = np.asarray(H, dtype=float)
    return EmbeddingBatch(np.arange(len(H)) if ids is None else np.asarray(ids), H)


# -- event centroids -----------------------------------------------------------

def test_centroid_examples():
    c = event_representation(_batch([[1.0, 3.0], [3.0, 5.0]]), [7, 7])
    assert c.event_ids.tolist() == [7] and c.H_e.tolist() == [[2.0, 4.0]]
    H = np.arange(6.0).reshape(3, 2)
    c = event_representation(_batch(H), [2, 0, 1])
    assert c.event_ids.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(c.H_e, H[[1, 2, 0]])


def test_centroids_match_second_pass():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((20, 4))
    labels = rng.integers(0, 3, 20)
    c = event_representation(_batch(H), labels)
    for e, row in zip(c.event_ids, c.H_e):
        acc = np.zeros(4)
        members = [i for i in range(20) if labels[i] == e]
        for i in members:
            acc += H[i]
        np.testing.assert_allclose(row, acc / len(members), atol=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        event_representation(_batch(np.zeros((0, 2))), [])


# -- GLECC -----------------------------------------------------------------------

def test_glecc_examples():
    H = np.random.default_rng(1).standard_normal((6, 3))
    labels = [0, 0, 1, 1, 2, 2]
    assert glecc_loss(_batch(H), _batch(H), labels) == 0.0
    assert glecc_loss(_batch(H), _batch(H + np.array([0.0, 1.0, 0.0])), labels) == \
        pytest.approx(1.0)
    g = np.zeros((2, 2))
    l = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert glecc_loss(_batch(g), _batch(l), [0, 1]) == pytest.approx(2.5)


def test_glecc_node_mismatch():
    with pytest.raises(ValueError):
        glecc_loss(_batch(np.zeros((2, 2)), [0, 1]), _batch(np.zeros((2, 2)), [0, 2]), [0, 1])


@pytest.mark.parametrize("diff, expected", [(0.0, 1.0), (-math.log(2), 0.5), (5.0, 1.0)])
def test_gate_examples(diff, expected):
    assert glecc_gate(1.0 + diff, 1.0) == pytest.approx(expected)


@settings(max_examples=100)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_gate_range(a, b):
    gate = glecc_gate(a, b)
    assert 0.0 < gate <= 1.0
    assert (gate == 1.0) == (b <= a) or abs(a - b) < 1e-15


# -- training epoch ---------------------------------------------------------------

@pytest.fixture(scope="module")
def setup(tiny_datasets):
    ds = tiny_datasets[0]
    g = project_homogeneous(ds.messages)
    cfg = EncoderConfig(d_in=g.features.shape[1], **TINY_ENCODER)
    return cfg, g, ds.splits["train"]


def _epoch(setup, theta, theta_g=None, train=TINY_TRAIN, seed=0):
    cfg, g, idx = setup
    return local_train_epoch(theta, cfg, g, idx, AdamState.zeros(len(theta)),
                             np.random.default_rng(seed), train, theta_global=theta_g)


def test_global_model_is_frozen(setup):
    theta, theta_g = init_params(setup[0], 0), init_params(setup[0], 1)
    before = theta_g.to_bytes()
    new, _, logs = _epoch(setup, theta, theta_g)
    assert theta_g.to_bytes() == before
    assert not np.array_equal(new.values, theta.values)
    assert len(logs) == math.ceil(len(setup[2]) / TINY_TRAIN.batch_size)


def test_glecc_off_equals_triplet_only(setup):
    theta, theta_g = init_params(setup[0], 0), init_params(setup[0], 1)
    off = dataclasses.replace(TINY_TRAIN, glecc=False)
    a, _, la = _epoch(setup, theta, theta_g, off)
    b, _, lb = _epoch(setup, theta, None)
    np.testing.assert_array_equal(a.values, b.values)
    assert all(x.gate == 0.0 and x.glecc == 0.0 for x in la)
    assert [x.loss_local for x in la] == [x.loss_local for x in lb]


def test_glecc_changes_trajectory(setup):
    theta, theta_g = init_params(setup[0], 0), init_params(setup[0], 1)
    a, _, _ = _epoch(setup, theta, theta_g)
    b, _, _ = _epoch(setup, theta, None)
    assert not np.array_equal(a.values, b.values)


def test_identical_start_first_glecc_zero(setup):
    theta = init_params(setup[0], 0)
    _, _, logs = _epoch(setup, theta, theta.copy())
    assert logs[0].glecc == 0.0 and logs[0].gate == 1.0


def test_total_at_least_local(setup):
    theta, theta_g = init_params(setup[0], 0), init_params(setup[0], 1)
    _, _, logs = _epoch(setup, theta, theta_g)
    for x in logs:
        assert x.total >= x.loss_local
        assert x.total == pytest.approx(x.loss_local + x.gate * x.glecc)
        assert 0.0 < x.gate <= 1.0


def test_epoch_deterministic(setup):
    theta, theta_g = init_params(setup[0], 0), init_params(setup[0], 1)
    a, _, _ = _epoch(setup, theta, theta_g, seed=4)
    b, _, _ = _epoch(setup, theta, theta_g, seed=4)
    np.testing.assert_array_equal(a.values, b.values)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
