"""Client-side personalization: which layers stay local, and how hard.

Round flow for one client: learn a per-decoder-layer mixing coefficient on a
small probe batch, keep the layers whose coefficient clears the threshold
(the encoder-decoder projection is always kept), then fit element-wise
fusion weights for the kept set on the full training split. The fused tree
seeds local training. The critic head never leaves the client.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .agent_model import imitation_objective, local_train
from .env_gen import ClientDataset, Episode
from .param_space import (
    DECODER_LAYER_ORDER,
    FusionWeights,
    LayerKey,
    MixingCoefficients,
    ParamTree,
    ProtocolViolation,
    fuse_elementwise,
    strip_critic,
)

__all__ = [
    "SelectionConfig",
    "PersonalizationPlan",
    "ClientState",
    "RoundDiagnostics",
    "MODES",
    "learn_mixing_coefficients",
    "select_personalized_layers",
    "learn_fusion_weights",
    "build_personalized_init",
    "client_round",
]

# Protocol modes a client understands. "no_layer" is accepted as an alias
# for "fedavg": an empty personalized set degenerates to plain averaging.
MODES = ("pfednavi", "fedavg", "local_only", "all_layers")

_MAX_HALVINGS = 40


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs for the layer-selection and fusion stage.

    Defaults are the protocol's operating point. Zero step counts and zero
    learning rates are allowed so tests can freeze one stage at a time; the
    running protocol uses the positive defaults.
    """

    delta: float = 0.6          # keep a decoder layer when alpha >= delta
    alpha_lr: float = 0.1
    alpha_steps: int = 2
    alpha_batches: int = 2      # probe batch = this many training mini-batches
    alpha_joint: bool = True    # False: fit each layer's alpha in isolation
    w_lr: float = 0.1
    w_steps: int = 1
    full_w_round: int = 2       # round whose fusion weights run to convergence
    w_rel_tol: float = 1e-3
    w_max_steps: int = 200

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"selection threshold must lie in (0, 1), got {self.delta}")
        if self.alpha_lr < 0.0 or self.w_lr < 0.0:
            raise ValueError("learning rates must be non-negative")
        if self.alpha_steps < 0 or self.w_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.alpha_batches < 1:
            raise ValueError("alpha_batches must be >= 1")
        if self.full_w_round < 1:
            raise ValueError("full_w_round must be >= 1")
        if self.w_max_steps < 1:
            raise ValueError("w_max_steps must be >= 1")
        if not self.w_rel_tol > 0.0:
            raise ValueError("w_rel_tol must be positive")


@dataclass(frozen=True)
class PersonalizationPlan:
    """What one client keeps local this round, and how it is fused."""

    client_id: int
    round_index: int
    selected: frozenset[LayerKey]
    alpha: MixingCoefficients | None = None
    fusion: FusionWeights | None = None

    def __post_init__(self):
        selected = frozenset(self.selected)
        if LayerKey.CRITIC in selected:
            raise ProtocolViolation("the critic layer is never part of the fused set")
        if selected and LayerKey.ENC_DEC_PROJECTION not in selected:
            raise ValueError("a non-empty fused set must include the projection layer")
        object.__setattr__(self, "selected", selected)


@dataclass(frozen=True)
class ClientState:
    """What a client carries between rounds: its data, its full parameter
    tree (critic included), the fusion weights it keeps refining, and the
    trace of learned mixing coefficients."""

    client_id: int
    dataset: ClientDataset
    local_tree: ParamTree
    fusion_prior: FusionWeights | None = None
    alpha_history: tuple[MixingCoefficients, ...] = ()


@dataclass(frozen=True)
class RoundDiagnostics:
    """Observables from one client's participation in one round."""

    client_id: int
    round_index: int
    alpha: MixingCoefficients | None
    selected: frozenset[LayerKey]
    mean_fusion: Mapping[LayerKey, float]
    epoch_losses: tuple[float, ...]
    train_loss: float


def _expit(x: float) -> float:
    # exact 0.5 at 0, no overflow for large |x|
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _check_alignment(global_tree: ParamTree, local_tree: ParamTree):
    if not strip_critic(global_tree).shape_compatible(strip_critic(local_tree)):
        raise ValueError("global and local trees disagree in structure")
    if LayerKey.CRITIC not in local_tree:
        raise KeyError("local tree has no critic layer")


def learn_mixing_coefficients(
    global_tree: ParamTree,
    local_tree: ParamTree,
    batch: Sequence[Episode],
    houses,
    config: SelectionConfig,
    t_max: int = 12,
) -> MixingCoefficients:
    """Fit one mixing coefficient per decoder layer on a probe batch.

    Each coefficient is the sigmoid of an unconstrained variable starting at
    zero, so it begins at exactly 0.5 and stays in (0, 1) without clamping.
    During the fit every decoder layer is a convex mix of global and local
    anchored at the global side; all other layers use the global tensors
    (the critic, which the server never holds, comes from the local tree).
    Identical trees leave every coefficient at exactly 0.5: the mix is
    written in gap form, so a zero gap yields a zero gradient.
    """
    if not batch:
        raise ValueError("learn_mixing_coefficients: empty probe batch")
    _check_alignment(global_tree, local_tree)
    if config.alpha_joint:
        groups = [list(DECODER_LAYER_ORDER)]
    else:
        groups = [[k] for k in DECODER_LAYER_ORDER]
    rho = {k: 0.0 for k in DECODER_LAYER_ORDER}
    for group in groups:
        group_set = set(group)
        for _ in range(config.alpha_steps):
            tape = nx.Tape()
            leaves = {k: tape.leaf(np.asarray(rho[k])) for k in group}
            tensors: dict = {}
            for key, layer in global_tree.items():
                if key is LayerKey.CRITIC:
                    continue
                if key in group_set:
                    gate = nx.sigmoid(leaves[key])
                    for name, g in layer.items():
                        gap = np.asarray(local_tree[key][name]) - g
                        tensors[key, name] = nx.add(nx.const(g), nx.smul(nx.const(gap), gate))
                else:
                    for name, g in layer.items():
                        tensors[key, name] = nx.const(g)
            for name, arr in local_tree[LayerKey.CRITIC].items():
                tensors[LayerKey.CRITIC, name] = nx.const(arr)
            loss = imitation_objective(tensors, batch, houses, t_max)
            grads = nx.backward(tape, loss)
            for k in group:
                rho[k] -= config.alpha_lr * float(grads.get(leaves[k]))
    return MixingCoefficients({k: _expit(rho[k]) for k in DECODER_LAYER_ORDER})


def select_personalized_layers(alpha: MixingCoefficients, delta: float) -> frozenset[LayerKey]:
    """Decoder layers whose coefficient clears the threshold (inclusive)."""
    return frozenset(k for k in DECODER_LAYER_ORDER if alpha[k] >= delta)


def learn_fusion_weights(
    global_tree: ParamTree,
    local_tree: ParamTree,
    plan: PersonalizationPlan,
    batch: Sequence[Episode],
    houses,
    config: SelectionConfig,
    round_index: int,
    prior: FusionWeights | None = None,
    t_max: int = 12,
) -> FusionWeights:
    """Element-wise fusion weights for the plan's layer set.

    W gates how far each retained element moves from its local value toward
    the global one. Weights start from ``prior`` where a layer has history
    and from 0.5 otherwise. Normally ``w_steps`` projected gradient steps;
    on round ``full_w_round`` the weights are optimized until the relative
    loss change drops below ``w_rel_tol`` (or ``w_max_steps``), halving the
    step on any loss increase, so the accepted loss never goes up.
    """
    if not plan.selected:
        return FusionWeights({})
    if not batch:
        raise ValueError("learn_fusion_weights: empty batch")
    _check_alignment(global_tree, local_tree)
    selected = sorted(plan.selected, key=lambda k: k.value)
    for key in selected:
        if key not in global_tree:
            raise KeyError(f"plan selects a layer absent from the global tree: {key.value}")

    w: dict[LayerKey, dict[str, np.ndarray]] = {}
    for key in selected:
        layer = local_tree[key]
        if prior is not None and key in prior:
            w[key] = {name: np.array(prior[key][name], dtype=np.float64) for name in layer}
        else:
            w[key] = {name: np.full(np.shape(arr), 0.5) for name, arr in layer.items()}

    def taped_loss(wvals):
        tape = nx.Tape()
        leaves: dict = {}
        tensors: dict = {}
        for key, layer in global_tree.items():
            if key is LayerKey.CRITIC:
                continue
            if key in wvals:
                for name, g in layer.items():
                    local = np.asarray(local_tree[key][name])
                    leaf = tape.leaf(wvals[key][name])
                    leaves[key, name] = leaf
                    tensors[key, name] = nx.add(nx.const(local), nx.mul(leaf, nx.const(g - local)))
            else:
                for name, g in layer.items():
                    tensors[key, name] = nx.const(g)
        for name, arr in local_tree[LayerKey.CRITIC].items():
            tensors[LayerKey.CRITIC, name] = nx.const(arr)
        loss = imitation_objective(tensors, batch, houses, t_max)
        grads = nx.backward(tape, loss)
        return float(loss.value), {kn: grads.get(leaf) for kn, leaf in leaves.items()}

    def stepped(wvals, grads, step):
        return {
            key: {
                name: np.clip(wvals[key][name] - step * grads[key, name], 0.0, 1.0)
                for name in wvals[key]
            }
            for key in wvals
        }

    if round_index != config.full_w_round:
        for _ in range(config.w_steps):
            _, g = taped_loss(w)
            w = stepped(w, g, config.w_lr)
        return FusionWeights(w)

    loss_cur, g = taped_loss(w)
    for _ in range(config.w_max_steps):
        step = config.w_lr
        accepted = None
        for _ in range(_MAX_HALVINGS):
            cand = stepped(w, g, step)
            loss_cand, g_cand = taped_loss(cand)
            if loss_cand <= loss_cur:
                accepted = (cand, loss_cand, g_cand)
                break
            step *= 0.5
        if accepted is None:
            break  # no descent step at any tried length; keep current weights
        w, loss_new, g = accepted
        rel = abs(loss_cur - loss_new) / max(abs(loss_cur), 1e-12)
        loss_cur = loss_new
        if rel < config.w_rel_tol:
            break
    return FusionWeights(w)


def build_personalized_init(
    global_tree: ParamTree, local_tree: ParamTree, plan: PersonalizationPlan
) -> ParamTree:
    """Assemble the round's starting tree from the plan.

    Layers in the plan are fused element-wise from local toward global;
    every other layer inherits the global tensors unchanged; the critic is
    always the client's own. Fusion weights of unselected layers are never
    read.
    """
    if LayerKey.CRITIC in global_tree:
        raise ProtocolViolation("received a global tree carrying a critic layer")
    if LayerKey.CRITIC not in local_tree:
        raise KeyError("local tree has no critic layer to keep")
    missing = [k.value for k in plan.selected if k not in global_tree]
    if missing:
        raise KeyError(f"plan selects layers absent from the global tree: {sorted(missing)}")
    if plan.selected and plan.fusion is None:
        raise ValueError("plan selects layers but carries no fusion weights")

    layers: dict[LayerKey, dict[str, np.ndarray]] = {}
    for key, g_layer in global_tree.items():
        if key in plan.selected:
            if key not in plan.fusion:
                raise KeyError(f"no fusion weights for selected layer {key.value}")
            layers[key] = fuse_elementwise(local_tree[key], g_layer, plan.fusion[key])
        else:
            layers[key] = {name: arr for name, arr in g_layer.items()}
    layers[LayerKey.CRITIC] = {name: arr for name, arr in local_tree[LayerKey.CRITIC].items()}
    return ParamTree(layers)


def _probe_batch(episodes: Sequence[Episode], want: int, rng: np.random.Generator):
    take = min(len(episodes), want)
    idx = rng.choice(len(episodes), size=take, replace=False)
    return [episodes[int(i)] for i in idx]


def _merged_prior(prior: FusionWeights | None, learned: FusionWeights) -> FusionWeights:
    merged: dict[LayerKey, dict[str, np.ndarray]] = {}
    if prior is not None:
        for key in prior.keys():
            merged[key] = {name: np.array(arr) for name, arr in prior[key].items()}
    for key in learned.keys():
        merged[key] = {name: np.array(arr) for name, arr in learned[key].items()}
    return FusionWeights(merged)


def _layer_means(fusion: FusionWeights | None) -> dict[LayerKey, float]:
    if fusion is None:
        return {}
    out: dict[LayerKey, float] = {}
    for key in sorted(fusion.keys(), key=lambda k: k.value):
        flat = np.concatenate([np.ravel(arr) for arr in fusion[key].values()])
        out[key] = float(flat.mean())
    return out


def client_round(
    state: ClientState,
    global_tree: ParamTree,
    round_index: int,
    config,
    rng: np.random.Generator,
):
    """One client's full round under the configured protocol mode.

    ``config`` is the federation round config (``mode``, ``selection``, and
    the local-training hyperparameters). ``rng`` is this client's per-round
    stream; it is split so the training draw is identical across modes, and
    the probe-batch draw consumes only its own branch.

    Returns ``(upload, new_state, diagnostics)``. The upload never carries
    the critic layer.
    """
    sel: SelectionConfig = config.selection
    mode = "fedavg" if config.mode == "no_layer" else config.mode
    if mode not in MODES:
        raise ValueError(f"unknown protocol mode: {config.mode!r}")
    rng_probe, rng_train = rng.spawn(2)
    dataset = state.dataset
    house = dataset.house
    train_eps = dataset.train_episodes

    alpha = None
    fusion = None
    if mode == "local_only":
        init = state.local_tree
        selected: frozenset[LayerKey] = frozenset()
    elif mode == "fedavg":
        plan = PersonalizationPlan(state.client_id, round_index, frozenset())
        init = build_personalized_init(global_tree, state.local_tree, plan)
        selected = frozenset()
    else:
        if mode == "pfednavi":
            probe = _probe_batch(train_eps, sel.alpha_batches * config.batch_size, rng_probe)
            alpha = learn_mixing_coefficients(
                global_tree, state.local_tree, probe, house, sel, config.t_max
            )
            selected = frozenset({LayerKey.ENC_DEC_PROJECTION}) | select_personalized_layers(
                alpha, sel.delta
            )
        else:  # all_layers: skip selection, keep every transferable layer
            selected = frozenset(global_tree.keys())
        plan = PersonalizationPlan(state.client_id, round_index, selected, alpha=alpha)
        fusion = learn_fusion_weights(
            global_tree, state.local_tree, plan, train_eps, house, sel,
            round_index, state.fusion_prior, config.t_max,
        )
        plan = dataclasses.replace(plan, fusion=fusion)
        init = build_personalized_init(global_tree, state.local_tree, plan)

    trained, epoch_losses = local_train(
        init, dataset, config.local_epochs, config.local_lr, config.il_rl_mix,
        rng_train, config.batch_size, config.t_max,
    )
    upload = strip_critic(trained)
    new_prior = _merged_prior(state.fusion_prior, fusion) if fusion is not None else state.fusion_prior
    history = state.alpha_history + ((alpha,) if alpha is not None else ())
    new_state = dataclasses.replace(
        state, local_tree=trained, fusion_prior=new_prior, alpha_history=history
    )
    diag = RoundDiagnostics(
        client_id=state.client_id,
        round_index=round_index,
        alpha=alpha,
        selected=selected,
        mean_fusion=_layer_means(fusion),
        epoch_losses=tuple(float(x) for x in epoch_losses),
        train_loss=float(np.mean(epoch_losses)),
    )
    return upload, new_state, diag
