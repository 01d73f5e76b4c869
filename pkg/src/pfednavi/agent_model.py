"""The miniature navigation agent and its training losses.

Encoder: token embedding, a GRU over the instruction, and a linear
projection of the final hidden state into the decoder. Decoder, per step:
candidate action embedding, attention over candidate visual features, GRU
state update, dot-product attention over the instruction context, bilinear
candidate scoring. A linear critic head reads the same attentional state.

Two forward paths exist on purpose. ``encode_instruction``, ``decode_step``
and ``rollout`` are the plain single-episode reference; ``imitation_loss``,
``rl_loss`` and ``local_train`` run a padded batched version of the same
wiring for speed. Tests pin the two paths against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .env_gen import ClientDataset, Episode, HeterogeneityConfig, HouseGraph
from .numerics import _log_softmax
from .param_space import LayerKey, ParamTree

_GRU_NAMES = ("w_update", "b_update", "w_reset", "b_reset", "w_cand", "b_cand")
_NEG = -1e30  # additive mask for padded attention slots


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the agent; defaults give the desk-scale model."""

    vocab_size: int
    obs_dim: int
    cand_dim: int
    embed_dim: int = 24
    enc_hidden: int = 32
    dec_hidden: int = 32
    t_max: int = 12

    def __post_init__(self):
        for name in ("vocab_size", "obs_dim", "cand_dim", "embed_dim",
                     "enc_hidden", "dec_hidden", "t_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")

    @classmethod
    def for_environment(cls, env: HeterogeneityConfig, **overrides) -> "ModelConfig":
        return cls(vocab_size=env.vocab_size, obs_dim=env.obs_dim,
                   cand_dim=env.cand_dim, **overrides)


@dataclass
class AgentState:
    hidden: nx.Tensor  # (1, dec_hidden) row vector
    node: int
    step: int


@dataclass(frozen=True)
class EpisodeDiag:
    steps: int
    success: bool


@dataclass(frozen=True)
class LossReport:
    """Scalar loss, its gradient tree (same keys as the parameters), and
    per-episode rollout diagnostics."""

    value: float
    gradients: ParamTree
    diagnostics: tuple[EpisodeDiag, ...]


class RolloutMode(Enum):
    TEACHER_FORCING = "teacher_forcing"
    GREEDY = "greedy"
    SAMPLE = "sample"


def _layer_shapes(cfg: ModelConfig) -> dict:
    def gru(din: int, hid: int) -> dict:
        return {
            "w_update": (din + hid, hid), "b_update": (hid,),
            "w_reset": (din + hid, hid), "b_reset": (hid,),
            "w_cand": (din + hid, hid), "b_cand": (hid,),
        }

    e, enc, dec = cfg.embed_dim, cfg.enc_hidden, cfg.dec_hidden
    return {
        LayerKey.EMBEDDING: {"weight": (cfg.vocab_size, e)},
        LayerKey.ENCODER_RNN: gru(e, enc),
        LayerKey.ENC_DEC_PROJECTION: {"weight": (enc, dec), "bias": (dec,)},
        LayerKey.DEC_ACTION_EMBED: {"weight": (cfg.cand_dim, e), "bias": (e,)},
        LayerKey.DEC_VISUAL_ATTN: {"weight": (dec, cfg.cand_dim)},
        LayerKey.DEC_STATE_UPDATE: gru(cfg.cand_dim + cfg.obs_dim, dec),
        LayerKey.DEC_INSTR_ATTN: {"weight": (dec, enc),
                                  "combine": (dec + enc, dec),
                                  "combine_bias": (dec,)},
        LayerKey.DEC_CANDIDATE_SCORE: {"weight": (dec, e)},
        LayerKey.CRITIC: {"weight": (dec, 1), "bias": (1,)},
    }


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamTree:
    """Weights uniform in +-1/sqrt(rows) (rows = input dim), biases zero.

    The draw order is the literal layer/tensor order of the shape table, so
    one rng yields one reproducible tree.
    """
    layers = {}
    for key, shapes in _layer_shapes(config).items():
        tensors = {}
        for name, shape in shapes.items():
            if len(shape) == 1:
                tensors[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        layers[key] = tensors
    return ParamTree(layers)


class _Net:
    """Parameters exposed as tensors: tape leaves when a tape is given,
    plain constants otherwise (the tape-free inference path)."""

    def __init__(self, params: ParamTree, tape: nx.Tape | None = None):
        self.tape = tape
        if tape is None:
            self._t = {(k, n): nx.Tensor(a) for k, n, a in params.flat_items()}
        else:
            self._t = {(k, n): tape.leaf(a) for k, n, a in params.flat_items()}

    @classmethod
    def from_tensors(cls, tensors: Mapping[tuple[LayerKey, str], nx.Tensor]) -> "_Net":
        net = object.__new__(cls)
        net.tape = None
        net._t = dict(tensors)
        return net

    def p(self, key: LayerKey, name: str) -> nx.Tensor:
        try:
            return self._t[key, name]
        except KeyError:
            raise KeyError(f"missing parameter layer: {key.value}/{name}") from None

    def gru(self, key: LayerKey) -> tuple:
        return tuple(self.p(key, n) for n in _GRU_NAMES)


def _house_of(houses, episode: Episode) -> HouseGraph:
    if isinstance(houses, HouseGraph):
        return houses
    return houses[episode.house_id]


# ---------------------------------------------------------------------------
# single-episode reference path
# ---------------------------------------------------------------------------


def encode_instruction(params: ParamTree, tokens: Sequence[int],
                       tape: nx.Tape | None = None):
    """Embed and encode one instruction.

    Returns ``(context, state)``: the per-token hidden states stacked into an
    ``(m, enc_hidden)`` matrix, and the projected final hidden state as a
    ``(1, dec_hidden)`` row. Both are differentiable when a tape is given.
    """
    net = _Net(params, tape)
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        raise ValueError("encode_instruction: empty instruction")
    vocab = net.p(LayerKey.EMBEDDING, "weight").shape[0]
    if toks.min() < 0 or toks.max() >= vocab:
        raise IndexError("encode_instruction: token outside the vocabulary")
    return _encode_single(net, toks)


def _encode_single(net: _Net, toks: np.ndarray):
    emb = nx.gather_rows(net.p(LayerKey.EMBEDDING, "weight"), toks)
    enc = net.p(LayerKey.ENCODER_RNN, "b_update").shape[0]
    h = nx.Tensor(np.zeros((1, enc)))
    rows = []
    for i in range(toks.size):
        h = nx.gru_step(nx.gather_rows(emb, [i]), h, *net.gru(LayerKey.ENCODER_RNN))
        rows.append(h)
    context = nx.concat(rows, axis=0)
    state = nx.affine(h, net.p(LayerKey.ENC_DEC_PROJECTION, "weight"),
                      net.p(LayerKey.ENC_DEC_PROJECTION, "bias"))
    return context, state


def _decode_single(net: _Net, hidden: nx.Tensor, context: nx.Tensor,
                   obs_row: nx.Tensor, cands: nx.Tensor):
    """One decoder step on 2-D tensors; returns (logits, value, next hidden)."""
    cand_emb = nx.tanh(nx.affine(cands, net.p(LayerKey.DEC_ACTION_EMBED, "weight"),
                                 net.p(LayerKey.DEC_ACTION_EMBED, "bias")))
    vis_q = nx.matmul(hidden, net.p(LayerKey.DEC_VISUAL_ATTN, "weight"))
    vis = nx.matmul(nx.softmax(nx.matmul_nt(vis_q, cands)), cands)
    h2 = nx.gru_step(nx.concat([vis, obs_row], axis=1), hidden,
                     *net.gru(LayerKey.DEC_STATE_UPDATE))
    instr_q = nx.matmul(h2, net.p(LayerKey.DEC_INSTR_ATTN, "weight"))
    summary = nx.matmul(nx.softmax(nx.matmul_nt(instr_q, context)), context)
    attentional = nx.tanh(nx.affine(nx.concat([h2, summary], axis=1),
                                    net.p(LayerKey.DEC_INSTR_ATTN, "combine"),
                                    net.p(LayerKey.DEC_INSTR_ATTN, "combine_bias")))
    logits = nx.matmul_nt(
        nx.matmul(attentional, net.p(LayerKey.DEC_CANDIDATE_SCORE, "weight")), cand_emb)
    value = nx.affine(attentional, net.p(LayerKey.CRITIC, "weight"),
                      net.p(LayerKey.CRITIC, "bias"))
    return logits, value, h2


def decode_step(params: ParamTree, state: AgentState, context: nx.Tensor,
                observation: np.ndarray, candidates: np.ndarray):
    """Score the candidate actions at the current node.

    ``observation`` is the node feature vector, ``candidates`` the
    ``(K, cand_dim)`` feature matrix with STOP in row 0. Returns logits over
    the K candidates, the critic's value estimate, and the next hidden row.
    """
    net = _Net(params, state.hidden.tape)
    obs = nx.Tensor(np.asarray(observation, dtype=np.float64)[None, :])
    cands = nx.Tensor(np.asarray(candidates, dtype=np.float64))
    return _decode_single(net, state.hidden, context, obs, cands)


def _forced_actions(house: HouseGraph, path: Sequence[int]) -> list[int]:
    # Candidate 0 is STOP; moving to neighbor j is action j+1.
    actions = []
    for u, v in zip(path, path[1:]):
        actions.append(house.neighbors[u].index(v) + 1)
    actions.append(0)
    return actions


def rollout(params: ParamTree, episode: Episode, house: HouseGraph,
            mode: RolloutMode, rng: np.random.Generator | None = None,
            t_max: int = 12):
    """Walk the house under the policy; tape-free.

    Returns ``(trajectory, log_probs, values)``: the node sequence starting
    at the episode's start node, and the chosen actions' log-probabilities
    and critic values per decision step.
    """
    if mode is RolloutMode.SAMPLE and rng is None:
        raise ValueError("rollout: Sample mode needs an rng")
    net = _Net(params, None)
    context, hidden = _encode_single(net, np.asarray(episode.instruction, dtype=np.int64))
    forced = None
    if mode is RolloutMode.TEACHER_FORCING:
        forced = _forced_actions(house, episode.path)
        if len(forced) > t_max:
            raise ValueError("rollout: reference path needs more than t_max steps")
    state = AgentState(hidden=hidden, node=episode.path[0], step=0)
    traj = [state.node]
    logps: list[float] = []
    values: list[float] = []
    horizon = len(forced) if forced is not None else t_max
    while state.step < horizon:
        obs = nx.Tensor(house.observations[state.node][None, :])
        cands = nx.Tensor(house.candidate_features(state.node))
        logits, value, hidden = _decode_single(net, state.hidden, context, obs, cands)
        logp = _log_softmax(logits.value)[0]
        if forced is not None:
            action = forced[state.step]
        elif mode is RolloutMode.GREEDY:
            action = int(np.argmax(logits.value[0]))
        else:
            action = _sample_index(np.exp(logp), rng)
        logps.append(float(logp[action]))
        values.append(float(value.value[0, 0]))
        state = AgentState(hidden=hidden,
                           node=state.node if action == 0
                           else house.candidates(state.node)[action],
                           step=state.step + 1)
        if action != 0:
            traj.append(state.node)
        elif forced is None:
            break
    return traj, logps, values


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum / cum[-1], rng.random(), side="right"))
    return min(idx, probs.size - 1)


# ---------------------------------------------------------------------------
# batched training path
# ---------------------------------------------------------------------------


@dataclass
class _StepRecord:
    logits: nx.Tensor    # (B, K) padded, masked with _NEG
    value: nx.Tensor     # (B, 1)
    actions: np.ndarray  # (B,) chosen/forced action, 0 where inactive
    active: np.ndarray   # (B,) float 0/1


def _batched_encode(net: _Net, instructions: Sequence[Sequence[int]]):
    lens = np.array([len(t) for t in instructions])
    b, m = len(instructions), int(lens.max())
    toks = np.zeros((b, m), dtype=np.int64)
    for i, t in enumerate(instructions):
        toks[i, : len(t)] = t
    weight = net.p(LayerKey.EMBEDDING, "weight")
    enc = net.p(LayerKey.ENCODER_RNN, "b_update").shape[0]
    h = nx.Tensor(np.zeros((b, enc)))
    cols = []
    for i in range(m):
        carry = (i < lens).astype(np.float64)[:, None]
        h = nx.gru_step(nx.gather_rows(weight, toks[:, i]), h,
                        *net.gru(LayerKey.ENCODER_RNN), carry=carry)
        cols.append(h)
    context = nx.stack_cols(cols)
    pad_mask = np.where(np.arange(m)[None, :] < lens[:, None], 0.0, _NEG)
    state = nx.affine(h, net.p(LayerKey.ENC_DEC_PROJECTION, "weight"),
                      net.p(LayerKey.ENC_DEC_PROJECTION, "bias"))
    return context, pad_mask, state


def _candidate_tables(net: _Net, houses: Sequence[HouseGraph]):
    """Embed every candidate row of every house once per pass.

    Returns (embedded (total, e) tensor, {house_id: per-node offsets}).
    """
    blocks, starts = [], {}
    offset = 0
    for house in houses:
        if house.house_id in starts:
            continue
        node_starts = []
        for node in range(house.n_nodes):
            feats = house.candidate_features(node)
            node_starts.append(offset)
            blocks.append(feats)
            offset += feats.shape[0]
        starts[house.house_id] = node_starts
    table = nx.Tensor(np.concatenate(blocks, axis=0))
    embedded = nx.tanh(nx.affine(table, net.p(LayerKey.DEC_ACTION_EMBED, "weight"),
                                 net.p(LayerKey.DEC_ACTION_EMBED, "bias")))
    return embedded, starts


def _run_batch(net: _Net, episodes: Sequence[Episode], houses, mode: RolloutMode,
               rng: np.random.Generator | None, t_max: int):
    """Advance every episode in lockstep; rows freeze once they stop.

    Returns (step records, trajectories). Frozen rows keep scoring their
    final node so no attention row is ever fully masked; their logits are
    excluded downstream through ``active``.
    """
    b = len(episodes)
    row_house = [_house_of(houses, ep) for ep in episodes]
    context, pad_mask, hidden = _batched_encode(net, [ep.instruction for ep in episodes])
    cand_emb, starts = _candidate_tables(net, row_house)

    forced = None
    if mode is RolloutMode.TEACHER_FORCING:
        forced = [_forced_actions(h, ep.path) for h, ep in zip(row_house, episodes)]
        horizon = max(len(f) for f in forced)
        if horizon > t_max:
            raise ValueError("teacher forcing needs more than t_max steps")
    else:
        horizon = t_max

    nodes = [ep.path[0] for ep in episodes]
    trajs = [[n] for n in nodes]
    alive = [True] * b
    records: list[_StepRecord] = []
    for t in range(horizon):
        if forced is not None:
            active = np.array([float(t < len(f)) for f in forced])
        else:
            active = np.array([float(a) for a in alive])
        if not active.any():
            break
        k_row = [len(row_house[i].candidates(nodes[i])) for i in range(b)]
        k = max(k_row)
        raw = np.zeros((b, k, row_house[0].candidate_features(0).shape[1]))
        idx = np.zeros((b, k), dtype=np.int64)
        mask = np.full((b, k), _NEG)
        obs = np.empty((b, row_house[0].observations.shape[1]))
        for i in range(b):
            feats = row_house[i].candidate_features(nodes[i])
            raw[i, : k_row[i]] = feats
            idx[i, : k_row[i]] = starts[row_house[i].house_id][nodes[i]] + np.arange(k_row[i])
            mask[i, : k_row[i]] = 0.0
            obs[i] = row_house[i].observations[nodes[i]]

        vis_q = nx.matmul(hidden, net.p(LayerKey.DEC_VISUAL_ATTN, "weight"))
        vis = nx.attend(vis_q, nx.Tensor(raw), mask)
        hidden = nx.gru_step(nx.concat([vis, nx.Tensor(obs)], axis=1), hidden,
                             *net.gru(LayerKey.DEC_STATE_UPDATE),
                             carry=active[:, None])
        instr_q = nx.matmul(hidden, net.p(LayerKey.DEC_INSTR_ATTN, "weight"))
        summary = nx.attend(instr_q, context, pad_mask)
        attentional = nx.tanh(nx.affine(
            nx.concat([hidden, summary], axis=1),
            net.p(LayerKey.DEC_INSTR_ATTN, "combine"),
            net.p(LayerKey.DEC_INSTR_ATTN, "combine_bias")))
        keys = nx.stack_cols([nx.gather_rows(cand_emb, idx[:, j]) for j in range(k)])
        logits = nx.pair_scores(
            nx.matmul(attentional, net.p(LayerKey.DEC_CANDIDATE_SCORE, "weight")),
            keys, mask)
        value = nx.affine(attentional, net.p(LayerKey.CRITIC, "weight"),
                          net.p(LayerKey.CRITIC, "bias"))

        actions = np.zeros(b, dtype=np.int64)
        for i in range(b):
            if not active[i]:
                continue
            if forced is not None:
                actions[i] = forced[i][t]
            elif mode is RolloutMode.GREEDY:
                actions[i] = int(np.argmax(logits.value[i, : k_row[i]]))
            else:
                probs = np.exp(_log_softmax(logits.value[i, : k_row[i]]))
                actions[i] = _sample_index(probs, rng)
            if actions[i] == 0:
                alive[i] = False
            else:
                nodes[i] = row_house[i].candidates(nodes[i])[actions[i]]
                trajs[i].append(nodes[i])
        records.append(_StepRecord(logits=logits, value=value,
                                   actions=actions, active=active))
    return records, trajs


def _grad_tree(net: _Net, grads: nx.Gradients, params: ParamTree) -> ParamTree:
    layers: dict = {key: {} for key in params.keys()}
    for (key, name), leaf in net._t.items():
        layers[key][name] = grads.get(leaf)
    return ParamTree(layers)


def _diagnostics(episodes, houses, records, trajs) -> tuple[EpisodeDiag, ...]:
    out = []
    for i, ep in enumerate(episodes):
        house = _house_of(houses, ep)
        steps = int(sum(rec.active[i] for rec in records))
        success = house.euclid(trajs[i][-1], ep.goal) <= house.success_radius
        out.append(EpisodeDiag(steps=steps, success=bool(success)))
    return tuple(out)


def _pooled_cross_entropy(records: Sequence[_StepRecord]) -> nx.Tensor:
    # Mean over all (episode, step) decisions, pooled across the batch so a
    # duplicated batch yields the identical value.
    terms = []
    total = 0.0
    for rec in records:
        count = float((rec.active != 0).sum())
        ce = nx.cross_entropy(rec.logits, rec.actions, rec.active)
        terms.append(nx.scale(ce, count))
        total += count
    return nx.scale(nx.add_n(terms), 1.0 / total)


def imitation_loss(params: ParamTree, batch: Sequence[Episode], houses,
                   t_max: int = 12) -> LossReport:
    """Teacher-forcing cross-entropy, averaged over every decision step.

    ``houses`` is either one house or a mapping from house id. The returned
    gradient tree spans every parameter key; the critic never feeds this
    loss, so its entries are exactly zero.
    """
    if not batch:
        raise ValueError("imitation_loss: empty batch")
    tape = nx.Tape()
    net = _Net(params, tape)
    records, trajs = _run_batch(net, batch, houses, RolloutMode.TEACHER_FORCING,
                                None, t_max)
    loss = _pooled_cross_entropy(records)
    grads = nx.backward(tape, loss)
    return LossReport(value=float(loss.value),
                      gradients=_grad_tree(net, grads, params),
                      diagnostics=_diagnostics(batch, houses, records, trajs))


def imitation_objective(tensors: Mapping[tuple[LayerKey, str], nx.Tensor],
                        batch: Sequence[Episode], houses,
                        t_max: int = 12) -> nx.Tensor:
    """Teacher-forcing loss over caller-built parameter tensors.

    The entries of ``tensors`` may be tape expressions, which is how the
    personalization stage differentiates this loss with respect to blending
    variables instead of the parameters themselves.
    """
    if not batch:
        raise ValueError("imitation_objective: empty batch")
    net = _Net.from_tensors(tensors)
    records, _ = _run_batch(net, batch, houses, RolloutMode.TEACHER_FORCING,
                            None, t_max)
    return _pooled_cross_entropy(records)


def _shaped_rewards(house: HouseGraph, goal: int, traj: Sequence[int],
                    actions: Sequence[int]) -> list[float]:
    """Per-decision reward: geodesic progress toward the goal, plus a
    terminal +-2 on the last decision (success measured within the house's
    success radius)."""
    dist = house.geodesic_from(goal)
    rewards = []
    pos = 0
    for i, action in enumerate(actions):
        r = 0.0
        if action != 0:
            r = float(dist[traj[pos]] - dist[traj[pos + 1]])
            pos += 1
        if i == len(actions) - 1:
            ok = house.euclid(traj[-1], goal) <= house.success_radius
            r += 2.0 if ok else -2.0
        rewards.append(r)
    return rewards


def _returns(rewards: Sequence[float], discount: float) -> list[float]:
    acc = 0.0
    out = []
    for r in reversed(rewards):
        acc = r + discount * acc
        out.append(acc)
    out.reverse()
    return out


def _rl_terms(records: Sequence[_StepRecord], episodes, houses, trajs,
              discount: float, critic_term_weight: float) -> nx.Tensor:
    """Policy-gradient and critic terms for a sampled batch, summed over
    rows and steps, divided by the row count."""
    b = len(episodes)
    row_actions = [[int(rec.actions[i]) for rec in records if rec.active[i]]
                   for i in range(b)]
    returns = np.zeros((len(records), b))
    for i, ep in enumerate(episodes):
        rew = _shaped_rewards(_house_of(houses, ep), ep.goal, trajs[i], row_actions[i])
        returns[: len(rew), i] = _returns(rew, discount)
    terms = []
    for t, rec in enumerate(records):
        # Advantage enters as a constant weight: no gradient to the critic
        # from the policy term.
        adv = (returns[t] - rec.value.value[:, 0]) * rec.active
        terms.append(nx.weighted_nll(rec.logits, rec.actions, adv))
        if critic_term_weight != 0.0:
            diff = nx.sub(nx.Tensor(returns[t][:, None]), rec.value)
            sq = nx.mul(nx.mul(diff, diff), nx.Tensor(rec.active[:, None]))
            terms.append(nx.scale(nx.reduce_sum(sq), critic_term_weight))
    return nx.scale(nx.add_n(terms), 1.0 / b)


def rl_loss(params: ParamTree, episode: Episode, house: HouseGraph,
            rng: np.random.Generator, t_max: int = 12, discount: float = 0.9,
            critic_term_weight: float = 1.0) -> LossReport:
    """Advantage actor-critic loss on one sampled rollout.

    The policy term weights each chosen action's negative log-probability by
    the detached advantage (discounted shaped return minus the critic's
    value); the critic term is the squared return error.
    """
    tape = nx.Tape()
    net = _Net(params, tape)
    records, trajs = _run_batch(net, [episode], house, RolloutMode.SAMPLE, rng, t_max)
    loss = _rl_terms(records, [episode], house, trajs, discount, critic_term_weight)
    grads = nx.backward(tape, loss)
    return LossReport(value=float(loss.value),
                      gradients=_grad_tree(net, grads, params),
                      diagnostics=_diagnostics([episode], house, records, trajs))


def local_train(params: ParamTree, dataset: ClientDataset, epochs: int, lr: float,
                il_rl_mix: float, rng: np.random.Generator, batch_size: int = 8,
                t_max: int = 12, discount: float = 0.9):
    """Plain SGD over shuffled mini-batches of the client's training split.

    The batch objective is ``il_rl_mix`` times the imitation loss plus the
    complement times the mean sampled-rollout RL loss. Returns the updated
    tree and the mean batch loss per epoch.
    """
    if epochs < 1:
        raise ValueError("local_train: epochs must be >= 1")
    if lr < 0.0:
        raise ValueError("local_train: negative learning rate")
    if not 0.0 <= il_rl_mix <= 1.0:
        raise ValueError("local_train: il_rl_mix outside [0, 1]")
    episodes = dataset.train_episodes
    house = dataset.house
    current = params
    epoch_losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(episodes))
        batch_losses = []
        for lo in range(0, len(order), batch_size):
            batch = [episodes[i] for i in order[lo : lo + batch_size]]
            tape = nx.Tape()
            net = _Net(current, tape)
            parts = []
            if il_rl_mix > 0.0:
                records, _ = _run_batch(net, batch, house,
                                        RolloutMode.TEACHER_FORCING, None, t_max)
                parts.append(nx.scale(_pooled_cross_entropy(records), il_rl_mix))
            if il_rl_mix < 1.0:
                records, trajs = _run_batch(net, batch, house, RolloutMode.SAMPLE,
                                            rng, t_max)
                rl = _rl_terms(records, batch, house, trajs, discount, 1.0)
                parts.append(nx.scale(rl, 1.0 - il_rl_mix))
            loss = parts[0] if len(parts) == 1 else nx.add_n(parts)
            batch_losses.append(float(loss.value))
            if lr == 0.0:
                continue
            grads = nx.backward(tape, loss)
            updated = {}
            for key in current.keys():
                updated[key] = {
                    name: arr - lr * grads.get(net.p(key, name))
                    for name, arr in current[key].items()
                }
            current = ParamTree(updated)
        epoch_losses.append(float(np.mean(batch_losses)))
    return current, epoch_losses


def greedy_trajectories(params: ParamTree, episodes: Sequence[Episode], houses,
                        t_max: int = 12) -> list[list[int]]:
    """Batched tape-free greedy rollouts; the evaluation fast path."""
    if not episodes:
        return []
    net = _Net(params, None)
    _, trajs = _run_batch(net, episodes, houses, RolloutMode.GREEDY, None, t_max)
    return trajs
