import dataclasses

import numpy as np
import pytest

from dame.encoder import ParamVector
from dame.federation import (ConfigError, ExperimentConfig, Federation, RoundError, RoundLog,
                             fedavg_aggregate, run_experiment)

from conftest import TINY_BOLA, TINY_ENCODER, TINY_TRAIN

LAYOUT = (("w", (2,)),)


def _pv(*v):
    return ParamVector(np.array(v, dtype=float), LAYOUT)


def _cfg(strategy="dame", rounds=2, **kw):
    return ExperimentConfig(strategy=strategy, rounds=rounds, seed=0, encoder=TINY_ENCODER,
                            train=TINY_TRAIN, bola=TINY_BOLA, eval_fanouts=(10, 5), **kw)


# -- FedAvg -----------------------------------------------------------------------

def test_fedavg_examples():
    assert fedavg_aggregate([_pv(1, 1), _pv(3, 3)], [5, 5]).values.tolist() == [2, 2]
    assert fedavg_aggregate([_pv(0, 0), _pv(4, 4)], [1, 3]).values.tolist() == [3, 3]
    assert fedavg_aggregate([_pv(7, 8)], [2]).values.tolist() == [7, 8]


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg_aggregate([_pv(1, 1), ParamVector(np.zeros(3), (("w", (3,)),))], [1, 1])
    with pytest.raises(ValueError):
        fedavg_aggregate([_pv(1, 1)], [0])
    with pytest.raises(ValueError):
        fedavg_aggregate([_pv(1, 1)], [1, 2])


# -- configuration ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(strategy="fedprox"), dict(rounds=0),
                                dict(roles={0: "spy"}), dict(poison_rate=0.0)])
def test_config_validation(kw, tiny_datasets):
    with pytest.raises(ConfigError):
        Federation(dataclasses.replace(_cfg(), **kw), tiny_datasets)


def test_no_datasets_rejected():
    with pytest.raises(ConfigError):
        Federation(_cfg(), [])


# -- rounds ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dame_logs(tiny_datasets):
    return run_experiment(_cfg("dame"), tiny_datasets)


def test_round_zero_symmetry(tiny_datasets):
    fed = Federation(_cfg(), tiny_datasets)
    first = fed.clients[0].theta.values
    assert all(np.array_equal(c.theta.values, first) for c in fed.clients)
    assert len({c.seed for c in fed.clients}) == fed.K


def test_dame_round_log_contract(dame_logs, tiny_datasets):
    K = len(tiny_datasets)
    assert [l.round for l in dame_logs] == [0, 1]
    for l in dame_logs:
        assert sorted(l.metrics) == list(range(K))
        assert len(l.lambdas) == K
        assert all(TINY_BOLA.alpha <= lam <= 1.0 for lam in l.lambdas.values())
        assert sorted(i for p in l.partition for i in p) == list(range(K))
        assert l.similarity.shape == (K, K)
        for k in range(K):
            assert l.bola_best_scores[k] >= l.bola_local_scores[k]
            assert len(l.bola_traces[k]) == TINY_BOLA.n_init + TINY_BOLA.n_iter


def test_bytes_accounting(dame_logs, tiny_datasets):
    fed = Federation(_cfg(), tiny_datasets)
    theta = fed.clients[0].theta
    assert fed.param_bytes == len(theta.to_bytes()) > 8 * len(theta)
    for l in dame_logs:
        assert set(l.bytes_per_client.values()) == {2 * fed.param_bytes}
    local = run_experiment(_cfg("local", rounds=2), tiny_datasets)
    assert all(set(l.bytes_per_client.values()) == {0} for l in local)
    assert all(not l.lambdas and not l.partition for l in local)


def test_dame_deterministic(dame_logs, tiny_datasets):
    again = run_experiment(_cfg("dame"), tiny_datasets)
    assert [l.metrics for l in again] == [l.metrics for l in dame_logs]
    assert [l.lambdas for l in again] == [l.lambdas for l in dame_logs]


def test_fedavg_dispatch_identical(tiny_datasets, monkeypatch):
    seen = []
    original = Federation._train

    def spy(self, c, theta, theta_global):
        seen.append((c.id, theta.values.copy(), theta_global))
        return original(self, c, theta, theta_global)
    monkeypatch.setattr(Federation, "_train", spy)
    run_experiment(_cfg("fedavg", rounds=2), tiny_datasets)
    K = len(tiny_datasets)
    assert len(seen) == 2 * K
    for r in range(2):
        batch = seen[r * K:(r + 1) * K]
        assert all(np.array_equal(b[1], batch[0][1]) for b in batch)
        assert all(b[2] is None for b in batch)


def test_identical_clients_get_identical_globals(tiny_datasets):
    fed = Federation(_cfg(), [tiny_datasets[0]] * 3)
    log_ = RoundLog(round=0, strategy="dame", metrics={})
    globals_ = fed.server_sega([c.upload(0) for c in fed.clients], 0, log_)
    # cosine of identical vectors is 1 up to rounding, hence the tolerance
    for g in globals_:
        np.testing.assert_allclose(g.values, globals_[0].values, rtol=0, atol=1e-12)


def test_single_client_reduces_to_local(tiny_datasets):
    logs = run_experiment(_cfg("dame", rounds=1), tiny_datasets[:1])
    l = logs[0]
    assert l.partition == [[0]]
    trace = l.bola_traces[0]
    assert len({r.score for r in trace}) == 1
    assert l.lambdas[0] == trace[0].lam


def test_privacy_boundary(tiny_datasets):
    before = [ds.to_records() for ds in tiny_datasets]
    fed = Federation(_cfg(roles={1: "data_poisoner"}), tiny_datasets)
    assert [ds.to_records() for ds in tiny_datasets] == before
    assert fed.clients[0].dataset is tiny_datasets[0]
    assert fed.clients[2].dataset is tiny_datasets[2]
    assert fed.clients[1].dataset.to_records() != before[1]


def test_model_poisoner_uploads_noise(tiny_datasets):
    fed = Federation(_cfg(roles={2: "model_poisoner"}), tiny_datasets)
    up = fed.clients[2].upload(0)
    own = fed.clients[2].theta
    assert not np.array_equal(up.values, own.values)
    assert np.linalg.norm(up.values) == pytest.approx(np.linalg.norm(own.values))
    assert fed.clients[0].upload(0) is fed.clients[0].theta


def test_round_error_attribution(tiny_datasets, monkeypatch):
    fed = Federation(_cfg(), tiny_datasets)

    def broken(*a, **k):
        raise FloatingPointError("boom")
    monkeypatch.setattr("dame.bola.bola_search", broken)
    with pytest.raises(RoundError) as info:
        fed.run_round(0)
    assert info.value.phase == "bola" and info.value.client == 0 and info.value.round == 0
    assert "round 0, phase bola, client 0" in str(info.value)
