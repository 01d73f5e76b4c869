"""Round orchestration: sampling, averaging, cadence, reproducibility."""

from __future__ import annotations

import numpy as np
import pytest

from pfednavi._seeding import DOMAIN_CLIENT, substream
from pfednavi.agent_model import init_params
from pfednavi.env_gen import HeterogeneityConfig, generate_client_dataset
from pfednavi.federation import (
    ExperimentConfig,
    FedConfig,
    ServerState,
    aggregate,
    run_experiment,
    run_round,
    sample_clients,
)
from pfednavi.param_space import (
    LayerKey,
    ParamTree,
    ProtocolViolation,
    strip_critic,
    trees_equal,
)
from pfednavi.personalization import ClientState, client_round

ENV = HeterogeneityConfig(
    scale_range=(5, 8),
    branching_range=(1.5, 2.5),
    verbosity_range=(0.0, 1.0),
    n_room_types=4,
    noise_dim=2,
    filler_tokens=4,
    vocab_size=20,
    episodes_per_client=6,
    hop_range=(2, 4),
    max_ref_hops=8,
)


def _fed(**kw) -> FedConfig:
    base = dict(
        n_clients=3,
        participation=0.5,
        rounds=2,
        local_epochs=1,
        local_lr=0.05,
        il_rl_mix=1.0,
        batch_size=4,
        eval_every=2,
        mode="pfednavi",
    )
    base.update(kw)
    return FedConfig(**base)


def _cfg(**kw) -> ExperimentConfig:
    return ExperimentConfig(fed=_fed(**kw), env=ENV, embed_dim=6, enc_hidden=7, dec_hidden=8)


def _population(seed: int, n: int = 3):
    cfg = _cfg()
    init = init_params(cfg.model_config(), substream(seed, 1))
    clients = {
        cid: ClientState(cid, generate_client_dataset(cid, ENV, seed), init) for cid in range(n)
    }
    return init, clients


# -- configuration ------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_clients=0),
        dict(participation=0.0),
        dict(participation=1.5),
        dict(rounds=-1),
        dict(local_epochs=0),
        dict(local_lr=-0.1),
        dict(il_rl_mix=1.2),
        dict(batch_size=0),
        dict(eval_every=0),
        dict(checkpoint_every=-1),
        dict(mode="bogus"),
    ],
)
def test_fed_config_rejects(kwargs):
    with pytest.raises(ValueError):
        _fed(**kwargs)


def test_server_state_rejects_critic():
    init, _ = _population(3)
    with pytest.raises(ValueError, match="critic"):
        ServerState(global_tree=init)


# -- client sampling ----------------------------------------------------------


def test_sample_clients_size_and_range():
    rng = substream(23, 5)
    for n, rate, want in [(10, 0.2, 2), (10, 0.25, 3), (10, 1.0, 10), (3, 0.5, 2), (1, 1.0, 1)]:
        picked = sample_clients(n, rate, rng)
        assert len(picked) == want
        assert len(set(picked)) == want
        assert picked == tuple(sorted(picked))
        assert all(0 <= c < n for c in picked)


def test_sample_clients_uniform_frequency():
    rng = substream(23, 7)
    counts = np.zeros(10)
    draws = 2000
    for _ in range(draws):
        for c in sample_clients(10, 0.2, rng):
            counts[c] += 1
    freq = counts / draws
    assert np.abs(freq - 0.2).max() <= 0.03


# -- aggregation ---------------------------------------------------------------


def _scalar_tree(v: float) -> ParamTree:
    return ParamTree({LayerKey.EMBEDDING: {"weight": np.array([[v]])}})


def test_aggregate_is_size_weighted_mean():
    out = aggregate([(0, _scalar_tree(1.0), 1), (1, _scalar_tree(5.0), 3)])
    assert out[LayerKey.EMBEDDING]["weight"][0, 0] == 4.0


def test_aggregate_rejects_critic_and_empty():
    bad = ParamTree(
        {
            LayerKey.EMBEDDING: {"weight": np.array([[1.0]])},
            LayerKey.CRITIC: {"weight": np.array([[1.0]])},
        }
    )
    with pytest.raises(ProtocolViolation):
        aggregate([(0, bad, 1)])
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_single_upload_is_identity():
    init, _ = _population(5)
    upload = strip_critic(init)
    assert trees_equal(aggregate([(2, upload, 7)]), upload)


def test_aggregate_ignores_listing_order():
    rng = substream(31, 2)
    trees = []
    for cid in range(4):
        init, _ = _population(40 + cid)
        trees.append((cid, strip_critic(init), int(rng.integers(1, 9))))
    forward = aggregate(trees)
    shuffled = aggregate([trees[2], trees[0], trees[3], trees[1]])
    assert trees_equal(forward, shuffled)


# -- one round ------------------------------------------------------------------


def test_round_leaves_nonparticipants_untouched():
    init, clients = _population(7)
    server = ServerState(strip_critic(init))
    s2, c2, rec = run_round(server, clients, _fed(), seed=7)
    assert len(rec.participants) == 2
    for cid in clients:
        if cid in rec.participants:
            assert not trees_equal(c2[cid].local_tree, clients[cid].local_tree)
        else:
            assert c2[cid] is clients[cid]
    assert s2.round_index == 1
    assert rec.mean_train_loss == pytest.approx(
        np.mean([rec.train_loss[c] for c in rec.participants])
    )


def test_round_outcome_is_order_independent():
    init, clients = _population(7)
    server = ServerState(strip_critic(init))
    fed = _fed()
    s2, _, rec = run_round(server, clients, fed, seed=7)
    uploads = []
    for cid in reversed(rec.participants):
        rng = substream(7, DOMAIN_CLIENT, cid, 1)
        up, _, _ = client_round(clients[cid], server.global_tree, 1, fed, rng)
        uploads.append((cid, up, clients[cid].dataset.size))
    assert trees_equal(aggregate(uploads), s2.global_tree)


# -- full experiments ------------------------------------------------------------


def test_first_round_matches_plain_averaging():
    # all clients start from the shared tree, so the structure-aware round
    # must reproduce the averaging baseline exactly
    a = run_experiment(_cfg(mode="pfednavi", rounds=1), seed=13)
    b = run_experiment(_cfg(mode="fedavg", rounds=1), seed=13)
    assert trees_equal(a.server.global_tree, b.server.global_tree)
    assert a.records[1].train_loss == b.records[1].train_loss


def test_evaluation_cadence_and_target():
    res = run_experiment(_cfg(rounds=5, eval_every=2, target_loss=1e9), seed=5)
    have = {rec.round_index for rec in res.records if rec.metrics is not None}
    assert have == {0, 2, 4, 5}
    assert res.rounds_to_target == 1
    none = run_experiment(_cfg(rounds=1, target_loss=None), seed=5)
    assert none.rounds_to_target is None


def test_zero_rounds_runs_only_initial_evaluation():
    res = run_experiment(_cfg(rounds=0), seed=9)
    assert len(res.records) == 1
    assert res.records[0].round_index == 0
    assert res.records[0].metrics is not None
    assert res.records[0].mean_train_loss is None
    assert res.server.round_index == 0


def test_local_only_never_moves_the_global_tree():
    res = run_experiment(_cfg(mode="local_only", rounds=2), seed=17)
    first = res.records[0].global_keys
    assert LayerKey.CRITIC not in first
    init_tree = strip_critic(init_params(_cfg().model_config(), substream(17, 1)))
    assert trees_equal(res.server.global_tree, init_tree)
    trained = [cid for cid in res.clients if len(res.clients[cid].alpha_history) == 0]
    assert trained  # local-only clients never learn mixing coefficients


@pytest.mark.parametrize("mode", ["pfednavi", "all_layers"])
def test_critic_stays_out_of_transit(mode):
    res = run_experiment(_cfg(mode=mode, rounds=3, eval_every=3), seed=21)
    for rec in res.records:
        assert LayerKey.CRITIC not in rec.global_keys
        for keys in rec.upload_keys.values():
            assert LayerKey.CRITIC not in keys


def test_experiment_is_reproducible():
    a = run_experiment(_cfg(rounds=2), seed=29)
    b = run_experiment(_cfg(rounds=2), seed=29)
    assert trees_equal(a.server.global_tree, b.server.global_tree)
    for ra, rb in zip(a.records, b.records):
        assert ra.mean_train_loss == rb.mean_train_loss
        if ra.metrics is not None:
            assert ra.metrics.mean == rb.metrics.mean


def test_checkpoints_written_and_loadable(tmp_path):
    res = run_experiment(_cfg(rounds=2, checkpoint_every=1), seed=3, checkpoint_dir=str(tmp_path))
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["server_round0001.pfnt", "server_round0002.pfnt"]
    reloaded = ParamTree.load(tmp_path / "server_round0002.pfnt")
    assert trees_equal(reloaded, res.server.global_tree)
