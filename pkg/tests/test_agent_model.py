"""Agent forward/backward contracts, rollouts, and local training."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from pfednavi._seeding import substream
from pfednavi.agent_model import (
    AgentState,
    ModelConfig,
    RolloutMode,
    decode_step,
    encode_instruction,
    greedy_trajectories,
    imitation_loss,
    init_params,
    local_train,
    rl_loss,
    rollout,
)
from pfednavi.env_gen import HeterogeneityConfig, generate_client_dataset
from pfednavi import numerics as nx
from pfednavi.param_space import LayerKey, ParamTree, tree_map, trees_equal

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
CFG = ModelConfig.for_environment(ENV, embed_dim=6, enc_hidden=7, dec_hidden=8)


def _instance(seed: int, client: int = 0):
    dataset = generate_client_dataset(client, ENV, seed)
    params = init_params(CFG, substream(seed, 1, client))
    return params, dataset


def test_config_rejects_degenerate_dims():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0, obs_dim=4, cand_dim=6)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=8, obs_dim=4, cand_dim=6, t_max=0)


def test_init_params_layout():
    params = init_params(CFG, substream(0, 1))
    assert set(params.keys()) == set(LayerKey)
    assert params[LayerKey.EMBEDDING]["weight"].shape == (20, 6)
    assert params[LayerKey.CRITIC]["weight"].shape == (8, 1)
    for key, name, arr in params.flat_items():
        if arr.ndim == 1:
            assert np.all(arr == 0.0), (key, name)
        else:
            bound = 1.0 / math.sqrt(arr.shape[0])
            assert np.all(np.abs(arr) <= bound), (key, name)
    again = init_params(CFG, substream(0, 1))
    assert trees_equal(params, again)


def test_encoder_shapes_and_projection_linearity():
    params, ds = _instance(3)
    instr = ds.episodes[0].instruction
    context, state = encode_instruction(params, instr)
    assert context.shape == (len(instr), CFG.enc_hidden)
    assert state.shape == (1, CFG.dec_hidden)

    bias = np.linspace(-1.0, 1.0, CFG.dec_hidden)
    zeroed = params.replace(LayerKey.ENC_DEC_PROJECTION, {
        "weight": np.zeros((CFG.enc_hidden, CFG.dec_hidden)),
        "bias": bias,
    })
    _, state0 = encode_instruction(zeroed, instr)
    assert np.array_equal(state0.value[0], bias)


def test_encoder_is_order_sensitive():
    params, ds = _instance(5)
    instr = list(ds.episodes[0].instruction)
    i, j = 0, len(instr) - 1
    assert instr[i] != instr[j]
    swapped = list(instr)
    swapped[i], swapped[j] = swapped[j], swapped[i]
    a, _ = encode_instruction(params, instr)
    b, _ = encode_instruction(params, swapped)
    assert not np.allclose(a.value, b.value)


def test_encoder_rejects_bad_tokens():
    params, _ = _instance(3)
    with pytest.raises(IndexError):
        encode_instruction(params, [0, CFG.vocab_size])
    with pytest.raises(ValueError):
        encode_instruction(params, [])


def test_decode_step_stop_only_candidate():
    params, ds = _instance(7)
    context, state0 = encode_instruction(params, ds.episodes[0].instruction)
    state = AgentState(hidden=state0, node=0, step=0)
    lone = ds.house.candidate_features(0)[:1]
    logits, value, nxt = decode_step(params, state, context,
                                     ds.house.observations[0], lone)
    assert nx.softmax(logits).value.tolist() == [[1.0]]
    assert value.shape == (1, 1)
    assert nxt.shape == (1, CFG.dec_hidden)


def test_decode_step_zero_scores_mean_uniform_policy():
    params, ds = _instance(7)
    flat = params.replace(LayerKey.DEC_CANDIDATE_SCORE, {
        "weight": np.zeros((CFG.dec_hidden, CFG.embed_dim)),
    })
    context, state0 = encode_instruction(flat, ds.episodes[0].instruction)
    state = AgentState(hidden=state0, node=0, step=0)
    cands = ds.house.candidate_features(0)
    logits, _, _ = decode_step(flat, state, context, ds.house.observations[0], cands)
    probs = nx.softmax(logits).value[0]
    assert np.all(logits.value == 0.0)
    assert np.allclose(probs, 1.0 / len(cands))
    assert abs(probs.sum() - 1.0) <= 1e-10


def test_decode_step_names_missing_layer():
    params, ds = _instance(7)
    context, state0 = encode_instruction(params, ds.episodes[0].instruction)
    state = AgentState(hidden=state0, node=0, step=0)
    with pytest.raises(KeyError, match="critic"):
        decode_step(params.without(LayerKey.CRITIC), state, context,
                    ds.house.observations[0], ds.house.candidate_features(0))


def test_every_layer_moves_the_decode_outputs():
    params, ds = _instance(9)
    house = ds.house
    context, state0 = encode_instruction(params, ds.episodes[0].instruction)
    state = AgentState(hidden=state0, node=1, step=0)
    obs, cands = house.observations[1], house.candidate_features(1)

    def outputs(tree):
        logits, value, _ = decode_step(tree, state, context, obs, cands)
        return float(logits.value.sum() + value.value[0, 0])

    base = outputs(params)
    rng = np.random.default_rng(0)
    decoder_keys = (LayerKey.DEC_ACTION_EMBED, LayerKey.DEC_VISUAL_ATTN,
                    LayerKey.DEC_STATE_UPDATE, LayerKey.DEC_INSTR_ATTN,
                    LayerKey.DEC_CANDIDATE_SCORE, LayerKey.CRITIC)
    for key in decoder_keys:
        bumped = params.replace(key, {
            name: arr + 1e-4 * rng.normal(size=arr.shape)
            for name, arr in params[key].items()
        })
        assert abs(outputs(bumped) - base) > 1e-12, key


def _valid_walk(house, traj):
    return all(b in house.neighbors[a] for a, b in zip(traj, traj[1:]))


def test_rollout_modes():
    params, ds = _instance(11)
    house = ds.house
    for ep in ds.episodes[:3]:
        traj, logps, values = rollout(params, ep, house, RolloutMode.TEACHER_FORCING)
        assert tuple(traj) == ep.path
        assert len(logps) == len(ep.path) and len(values) == len(logps)
        assert all(np.isfinite(lp) and lp <= 0.0 for lp in logps)

        g1 = rollout(params, ep, house, RolloutMode.GREEDY)
        g2 = rollout(params, ep, house, RolloutMode.GREEDY)
        assert g1 == g2
        assert _valid_walk(house, g1[0])
        assert len(g1[0]) <= CFG.t_max + 1

        s1 = rollout(params, ep, house, RolloutMode.SAMPLE, substream(11, 2))
        s2 = rollout(params, ep, house, RolloutMode.SAMPLE, substream(11, 2))
        assert s1 == s2
        assert _valid_walk(house, s1[0])
    with pytest.raises(ValueError):
        rollout(params, ds.episodes[0], house, RolloutMode.SAMPLE)


def test_uniform_policy_samples_first_actions_uniformly():
    params, ds = _instance(13)
    flat = params.replace(LayerKey.DEC_CANDIDATE_SCORE, {
        "weight": np.zeros((CFG.dec_hidden, CFG.embed_dim)),
    })
    house = ds.house
    node = next(n for n in range(house.n_nodes) if len(house.candidates(n)) == 3)
    goal = house.neighbors[node][0]
    ep = dataclasses.replace(ds.episodes[0], path=(node, goal), goal=goal)
    rng = substream(13, 3, 1)
    counts = np.zeros(3)
    for _ in range(200):
        traj, logps, _ = rollout(flat, ep, house, RolloutMode.SAMPLE, rng)
        if len(traj) == 1:
            counts[0] += 1
        else:
            counts[house.candidates(node).index(traj[1])] += 1
    freqs = counts / 200.0
    assert np.all(np.abs(freqs - 1.0 / 3.0) <= 0.08)


def test_imitation_loss_uniform_closed_form():
    params, ds = _instance(17)
    flat = params.replace(LayerKey.DEC_CANDIDATE_SCORE, {
        "weight": np.zeros((CFG.dec_hidden, CFG.embed_dim)),
    })
    batch = list(ds.train_episodes)
    report = imitation_loss(flat, batch, ds.house)
    logks = [math.log(len(ds.house.candidates(node)))
             for ep in batch for node in ep.path]
    assert abs(report.value - np.mean(logks)) <= 1e-12


def test_imitation_loss_is_duplication_invariant():
    params, ds = _instance(19)
    batch = list(ds.train_episodes[:3])
    once = imitation_loss(params, batch, ds.house)
    twice = imitation_loss(params, batch + batch, ds.house)
    assert once.value == twice.value


def test_imitation_loss_matches_stepwise_rollout():
    params, ds = _instance(23)
    batch = list(ds.train_episodes)
    report = imitation_loss(params, batch, ds.house)
    logps = []
    for ep in batch:
        _, lps, _ = rollout(params, ep, ds.house, RolloutMode.TEACHER_FORCING)
        logps.extend(lps)
    assert report.value == pytest.approx(-np.mean(logps), rel=1e-9, abs=1e-12)


def test_greedy_batch_agrees_with_stepwise_rollouts():
    params, ds = _instance(29)
    batch = list(ds.episodes)
    fast = greedy_trajectories(params, batch, ds.house)
    for ep, traj in zip(batch, fast):
        slow, _, _ = rollout(params, ep, ds.house, RolloutMode.GREEDY)
        assert traj == slow


def _flat_dot(a: ParamTree, b: ParamTree) -> float:
    total = 0.0
    for (_, _, x), (_, _, y) in zip(a.flat_items(), b.flat_items()):
        total += float((x * y).sum())
    return total


def test_imitation_gradient_matches_finite_differences():
    eps = 1e-5
    for seed in (31, 37, 41):
        params, ds = _instance(seed)
        batch = list(ds.train_episodes[:3])
        report = imitation_loss(params, batch, ds.house)
        rng = np.random.default_rng(seed)

        direction = tree_map(lambda k, n, p: rng.normal(size=p.shape), params)
        analytic = _flat_dot(report.gradients, direction)
        up = imitation_loss(tree_map(lambda k, n, p, d: p + eps * d, params, direction),
                            batch, ds.house).value
        down = imitation_loss(tree_map(lambda k, n, p, d: p - eps * d, params, direction),
                              batch, ds.house).value
        numeric = (up - down) / (2.0 * eps)
        assert abs(analytic - numeric) / max(1.0, abs(numeric)) < 1e-4

        flat = [(k, n, a) for k, n, a in params.flat_items() if a.size]
        for _ in range(8):
            key, name, arr = flat[rng.integers(len(flat))]
            pos = int(rng.integers(arr.size))

            def bumped(delta):
                tensors = {n: a.copy() for n, a in params[key].items()}
                tensors[name].flat[pos] += delta
                return params.replace(key, tensors)

            numeric = (imitation_loss(bumped(eps), batch, ds.house).value
                       - imitation_loss(bumped(-eps), batch, ds.house).value) / (2 * eps)
            analytic = float(report.gradients[key][name].flat[pos])
            assert abs(analytic - numeric) / max(1.0, abs(numeric)) < 1e-4


def test_imitation_gradient_skips_critic():
    params, ds = _instance(43)
    report = imitation_loss(params, list(ds.train_episodes), ds.house)
    assert set(report.gradients.keys()) == set(params.keys())
    for name in ("weight", "bias"):
        assert np.all(report.gradients[LayerKey.CRITIC][name] == 0.0)
    # Everything else trains.
    for key in params.keys():
        if key is LayerKey.CRITIC:
            continue
        assert any(np.any(report.gradients[key][n] != 0.0)
                   for n in report.gradients[key]), key


def test_rl_loss_matches_straight_line_recompute():
    params, ds = _instance(47)
    house = ds.house
    ep = ds.episodes[0]
    report = rl_loss(params, ep, house, substream(47, 5))
    traj, logps, values = rollout(params, ep, house, RolloutMode.SAMPLE,
                                  substream(47, 5))
    moves = len(traj) - 1
    stopped = len(logps) == moves + 1
    dist = house.geodesic_from(ep.goal)
    rewards = []
    for i in range(len(logps)):
        r = 0.0
        if i < moves:
            r = float(dist[traj[i]] - dist[traj[i + 1]])
        if i == len(logps) - 1:
            ok = house.euclid(traj[-1], ep.goal) <= house.success_radius
            r += 2.0 if ok else -2.0
        rewards.append(r)
    returns = []
    acc = 0.0
    for r in reversed(rewards):
        acc = r + 0.9 * acc
        returns.append(acc)
    returns.reverse()
    expected = sum(-lp * (ret - v) for lp, ret, v in zip(logps, returns, values))
    expected += sum((ret - v) ** 2 for ret, v in zip(returns, values))
    assert report.value == pytest.approx(expected, rel=1e-9)
    assert stopped or len(logps) == CFG.t_max
    assert report.diagnostics[0].steps == len(logps)


def test_rl_policy_term_detaches_the_critic():
    params, ds = _instance(53)
    ep = ds.episodes[1]
    no_critic_term = rl_loss(params, ep, ds.house, substream(53, 5),
                             critic_term_weight=0.0)
    for name in ("weight", "bias"):
        assert np.all(no_critic_term.gradients[LayerKey.CRITIC][name] == 0.0)
    with_critic = rl_loss(params, ep, ds.house, substream(53, 5))
    assert np.any(with_critic.gradients[LayerKey.CRITIC]["weight"] != 0.0)


def test_local_train_zero_lr_is_identity():
    params, ds = _instance(59)
    out, losses = local_train(params, ds, epochs=2, lr=0.0, il_rl_mix=0.8,
                              rng=substream(59, 5))
    assert trees_equal(out, params)
    assert len(losses) == 2 and all(np.isfinite(losses))


def test_local_train_is_deterministic():
    params, ds = _instance(61)
    a = local_train(params, ds, epochs=2, lr=0.05, il_rl_mix=0.8,
                    rng=substream(61, 5))
    b = local_train(params, ds, epochs=2, lr=0.05, il_rl_mix=0.8,
                    rng=substream(61, 5))
    assert trees_equal(a[0], b[0])
    assert a[1] == b[1]


def test_local_train_pure_imitation_descends():
    params, ds = _instance(67)
    single = dataclasses.replace(ds, train_indices=ds.train_indices[:1])
    out, losses = local_train(params, single, epochs=5, lr=0.05, il_rl_mix=1.0,
                              rng=substream(67, 5))
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert not trees_equal(out, params)


def test_teacher_forcing_respects_t_max():
    params, ds = _instance(71)
    ep = ds.episodes[0]
    with pytest.raises(ValueError):
        rollout(params, ep, ds.house, RolloutMode.TEACHER_FORCING,
                t_max=len(ep.path) - 1)
    with pytest.raises(ValueError):
        imitation_loss(params, [ep], ds.house, t_max=len(ep.path) - 1)
