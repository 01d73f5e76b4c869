"""Layer selection and fusion: fixed points, thresholds, and round wiring."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pfednavi._seeding import substream
from pfednavi.agent_model import ModelConfig, imitation_loss, init_params, local_train
from pfednavi.env_gen import HeterogeneityConfig, generate_client_dataset
from pfednavi.param_space import (
    DECODER_LAYER_ORDER,
    FusionWeights,
    LayerKey,
    MixingCoefficients,
    ProtocolViolation,
    strip_critic,
    trees_equal,
)
from pfednavi.personalization import (
    ClientState,
    PersonalizationPlan,
    SelectionConfig,
    build_personalized_init,
    client_round,
    learn_fusion_weights,
    learn_mixing_coefficients,
    select_personalized_layers,
)

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
SEL = SelectionConfig()
KSET = frozenset({LayerKey.ENC_DEC_PROJECTION, LayerKey.DEC_VISUAL_ATTN})


@dataclasses.dataclass(frozen=True)
class _RoundCfg:
    mode: str
    selection: SelectionConfig = SEL
    local_epochs: int = 1
    local_lr: float = 0.05
    il_rl_mix: float = 1.0
    batch_size: int = 4
    t_max: int = 12


def _plan(selected, alpha=None, fusion=None):
    return PersonalizationPlan(0, 1, frozenset(selected), alpha=alpha, fusion=fusion)


@pytest.fixture(scope="module")
def inst():
    ds = generate_client_dataset(0, ENV, 11)
    full = init_params(CFG, substream(11, 1, 0))
    return ds, full


@pytest.fixture(scope="module")
def warm(inst):
    # a local tree genuinely better than the shared one on this client's data
    ds, full = inst
    trained, _ = local_train(
        full, ds, epochs=3, lr=0.08, il_rl_mix=1.0, rng=substream(11, 3, 0), batch_size=4
    )
    return ds, full, trained


# -- configuration and plan types --------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(delta=0.0),
        dict(delta=1.0),
        dict(alpha_lr=-0.1),
        dict(w_lr=-1.0),
        dict(alpha_steps=-1),
        dict(w_steps=-2),
        dict(alpha_batches=0),
        dict(full_w_round=0),
        dict(w_max_steps=0),
        dict(w_rel_tol=0.0),
    ],
)
def test_selection_config_rejects(kwargs):
    with pytest.raises(ValueError):
        SelectionConfig(**kwargs)


def test_plan_rejects_critic_and_requires_projection():
    with pytest.raises(ProtocolViolation):
        PersonalizationPlan(0, 1, frozenset({LayerKey.CRITIC}))
    with pytest.raises(ValueError, match="projection"):
        PersonalizationPlan(0, 1, frozenset({LayerKey.DEC_ACTION_EMBED}))
    PersonalizationPlan(0, 1, frozenset())  # empty plan is the no-fusion case
    PersonalizationPlan(0, 1, frozenset({LayerKey.ENC_DEC_PROJECTION}))


# -- mixing coefficients ------------------------------------------------------


def test_mixing_stays_half_for_identical_trees(inst):
    ds, full = inst
    alpha = learn_mixing_coefficients(
        strip_critic(full), full, list(ds.train_episodes), ds.house, SEL
    )
    assert all(alpha[k] == 0.5 for k in DECODER_LAYER_ORDER)


def test_mixing_zero_steps_is_half(warm):
    ds, full, local = warm
    alpha = learn_mixing_coefficients(
        strip_critic(full), local, list(ds.train_episodes), ds.house,
        SelectionConfig(alpha_steps=0),
    )
    assert all(alpha[k] == 0.5 for k in DECODER_LAYER_ORDER)


def test_mixing_favors_better_local_tree(warm):
    ds, full, local = warm
    alpha = learn_mixing_coefficients(
        strip_critic(full), local, list(ds.train_episodes), ds.house, SEL
    )
    vals = [alpha[k] for k in DECODER_LAYER_ORDER]
    assert max(vals) > 0.5
    assert all(0.0 < v < 1.0 for v in vals)


def test_mixing_per_layer_flag(warm):
    ds, full, local = warm
    sel = SelectionConfig(alpha_joint=False)
    a1 = learn_mixing_coefficients(strip_critic(full), local, list(ds.train_episodes), ds.house, sel)
    a2 = learn_mixing_coefficients(strip_critic(full), local, list(ds.train_episodes), ds.house, sel)
    assert all(a1[k] == a2[k] for k in DECODER_LAYER_ORDER)
    assert max(a1[k] for k in DECODER_LAYER_ORDER) > 0.5


def test_mixing_rejects_empty_batch(inst):
    ds, full = inst
    with pytest.raises(ValueError, match="empty"):
        learn_mixing_coefficients(strip_critic(full), full, [], ds.house, SEL)


# -- layer selection ----------------------------------------------------------


def test_selection_threshold_is_inclusive():
    vals = dict(zip(DECODER_LAYER_ORDER, (0.61, 0.59, 0.6, 0.2, 0.9)))
    picked = select_personalized_layers(MixingCoefficients(vals), 0.6)
    assert picked == {DECODER_LAYER_ORDER[0], DECODER_LAYER_ORDER[2], DECODER_LAYER_ORDER[4]}


def test_selection_corners():
    half = MixingCoefficients({k: 0.5 for k in DECODER_LAYER_ORDER})
    assert select_personalized_layers(half, 0.6) == frozenset()
    spread = MixingCoefficients(dict(zip(DECODER_LAYER_ORDER, (0.61, 0.59, 0.6, 0.2, 0.9))))
    assert select_personalized_layers(spread, 0.95) == frozenset()


@given(
    vals=st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5),
    d1=st.floats(0.01, 0.99),
    d2=st.floats(0.01, 0.99),
)
def test_selection_monotone_in_threshold(vals, d1, d2):
    alpha = MixingCoefficients(dict(zip(DECODER_LAYER_ORDER, vals)))
    lo, hi = min(d1, d2), max(d1, d2)
    assert select_personalized_layers(alpha, hi) <= select_personalized_layers(alpha, lo)


# -- fusion weights -----------------------------------------------------------


def test_fusion_identical_trees_fixed_at_half(inst):
    ds, full = inst
    glob = strip_critic(full)
    batch = list(ds.train_episodes)
    for round_index in (1, SEL.full_w_round):
        w = learn_fusion_weights(glob, full, _plan(KSET), batch, ds.house, SEL, round_index)
        assert w.keys() == KSET
        for key in w.keys():
            for arr in w[key].values():
                assert np.all(arr == 0.5)


def test_fusion_zero_rate_keeps_init(warm):
    ds, full, local = warm
    glob = strip_critic(full)
    sel = SelectionConfig(w_lr=0.0, w_steps=3)
    prior = FusionWeights(
        {
            LayerKey.ENC_DEC_PROJECTION: {
                name: np.full(arr.shape, 0.25)
                for name, arr in full[LayerKey.ENC_DEC_PROJECTION].items()
            }
        }
    )
    w = learn_fusion_weights(
        glob, local, _plan(KSET), list(ds.train_episodes), ds.house, sel, 1, prior=prior
    )
    for arr in w[LayerKey.ENC_DEC_PROJECTION].values():
        assert np.all(arr == 0.25)  # persisted layer starts from its prior
    for arr in w[LayerKey.DEC_VISUAL_ATTN].values():
        assert np.all(arr == 0.5)  # fresh layer starts from 0.5


def test_fusion_weights_stay_in_unit_box(warm):
    ds, full, local = warm
    sel = SelectionConfig(w_lr=1e8, w_steps=2)
    w = learn_fusion_weights(
        strip_critic(full), local, _plan(KSET), list(ds.train_episodes), ds.house, sel, 1
    )
    lo = min(arr.min() for key in w.keys() for arr in w[key].values())
    hi = max(arr.max() for key in w.keys() for arr in w[key].values())
    assert 0.0 <= lo and hi <= 1.0
    assert lo == 0.0 or hi == 1.0  # a rate this large saturates the clamp somewhere


def test_fusion_convergence_round_never_raises_loss(warm):
    ds, full, local = warm
    glob = strip_critic(full)
    batch = list(ds.train_episodes)
    plan = _plan(KSET)
    w = learn_fusion_weights(glob, local, plan, batch, ds.house, SEL, SEL.full_w_round)
    init_w = FusionWeights(
        {key: {n: np.full(a.shape, 0.5) for n, a in local[key].items()} for key in plan.selected}
    )

    def loss_at(fw):
        tree = build_personalized_init(glob, local, dataclasses.replace(plan, fusion=fw))
        return imitation_loss(tree, batch, ds.house).value

    assert loss_at(w) < loss_at(init_w)


def test_fusion_empty_plan_and_empty_batch(inst):
    ds, full = inst
    glob = strip_critic(full)
    w = learn_fusion_weights(glob, full, _plan(frozenset()), list(ds.train_episodes), ds.house, SEL, 1)
    assert w.keys() == frozenset()
    with pytest.raises(ValueError, match="empty"):
        learn_fusion_weights(glob, full, _plan(KSET), [], ds.house, SEL, 1)


# -- assembling the personalized initialization -------------------------------


def test_build_init_matches_elementwise_oracle():
    rng = substream(17, 9)
    glob = strip_critic(init_params(CFG, substream(17, 1, 0)))
    local = init_params(CFG, substream(17, 1, 1))
    selected = frozenset(
        {LayerKey.ENC_DEC_PROJECTION, LayerKey.DEC_STATE_UPDATE, LayerKey.DEC_CANDIDATE_SCORE}
    )
    fusion = FusionWeights(
        {
            key: {n: rng.uniform(0.0, 1.0, np.shape(a)) for n, a in local[key].items()}
            for key in selected
        }
    )
    built = build_personalized_init(glob, local, _plan(selected, fusion=fusion))
    for key, name, arr in built.flat_items():
        if key is LayerKey.CRITIC:
            assert np.array_equal(arr, local[key][name])
        elif key in selected:
            l_flat = local[key][name].ravel()
            g_flat = glob[key][name].ravel()
            w_flat = fusion[key][name].ravel()
            expect = np.array(
                [l_flat[i] + w_flat[i] * (g_flat[i] - l_flat[i]) for i in range(l_flat.size)]
            ).reshape(arr.shape)
            assert np.array_equal(arr, expect)
        else:
            assert np.array_equal(arr, glob[key][name])


def test_build_init_rejections(inst):
    ds, full = inst
    glob = strip_critic(full)
    with pytest.raises(ProtocolViolation):
        build_personalized_init(full, full, _plan(frozenset()))
    with pytest.raises(KeyError):
        build_personalized_init(glob, glob, _plan(frozenset()))
    with pytest.raises(ValueError, match="fusion"):
        build_personalized_init(glob, full, _plan({LayerKey.ENC_DEC_PROJECTION}))


# -- the full client round ----------------------------------------------------


def test_round_one_collapses_across_modes(inst):
    # with local == global the whole pipeline must reduce to the plain
    # averaging client, bit for bit, whatever the mode
    ds, full = inst
    glob = strip_critic(full)
    uploads = {}
    for mode in ("pfednavi", "fedavg", "no_layer"):
        state = ClientState(0, ds, full)
        up, new_state, _ = client_round(state, glob, 1, _RoundCfg(mode=mode), substream(11, 3, 0, 1))
        assert LayerKey.CRITIC not in up
        assert LayerKey.CRITIC in new_state.local_tree
        uploads[mode] = up
    assert trees_equal(uploads["pfednavi"], uploads["fedavg"])
    assert trees_equal(uploads["no_layer"], uploads["fedavg"])


def test_identical_trees_ignore_selection_knobs(inst):
    ds, full = inst
    glob = strip_critic(full)
    outs = []
    for sel in (SEL, SelectionConfig(delta=0.2, alpha_lr=5.0, w_lr=3.0, w_steps=4)):
        state = ClientState(0, ds, full)
        up, _, _ = client_round(
            state, glob, 1, _RoundCfg(mode="pfednavi", selection=sel), substream(11, 3, 0, 1)
        )
        outs.append(up)
    assert trees_equal(outs[0], outs[1])


@pytest.mark.parametrize("mode", ["pfednavi", "fedavg", "no_layer", "local_only", "all_layers"])
def test_upload_is_critic_free(inst, mode):
    ds, full = inst
    state = ClientState(0, ds, full)
    up, _, _ = client_round(state, strip_critic(full), 1, _RoundCfg(mode=mode), substream(5, 3, 0, 1))
    assert LayerKey.CRITIC not in up
    assert set(up.keys()) == set(strip_critic(full).keys())


def test_unknown_mode_rejected(inst):
    ds, full = inst
    with pytest.raises(ValueError, match="mode"):
        client_round(
            ClientState(0, ds, full), strip_critic(full), 1, _RoundCfg(mode="solo"), substream(5, 3, 0, 1)
        )


def test_all_layers_mode_selects_every_transferable_layer(inst):
    ds, full = inst
    glob = strip_critic(full)
    up, new_state, diag = client_round(
        ClientState(0, ds, full), glob, 1, _RoundCfg(mode="all_layers"), substream(11, 3, 0, 1)
    )
    assert diag.selected == frozenset(glob.keys())
    assert LayerKey.EMBEDDING in diag.selected
    assert diag.alpha is None
    assert LayerKey.CRITIC not in up
    assert set(new_state.fusion_prior.keys()) == set(glob.keys())


def test_local_only_ignores_global(inst):
    ds, full = inst
    other = strip_critic(init_params(CFG, substream(99, 1, 5)))
    cfg = _RoundCfg(mode="local_only")
    _, s1, _ = client_round(ClientState(0, ds, full), strip_critic(full), 1, cfg, substream(11, 3, 0, 1))
    _, s2, _ = client_round(ClientState(0, ds, full), other, 1, cfg, substream(11, 3, 0, 1))
    assert trees_equal(s1.local_tree, s2.local_tree)
    # and it matches a direct training run from the previous tree
    _, rng_train = substream(11, 3, 0, 1).spawn(2)
    expect, _ = local_train(full, ds, 1, 0.05, 1.0, rng_train, batch_size=4)
    assert trees_equal(s1.local_tree, expect)


def test_round_diagnostics_and_state_threading(warm):
    ds, full, local = warm
    glob = strip_critic(full)
    cfg = _RoundCfg(mode="pfednavi", local_epochs=2)
    state = ClientState(3, ds, local)
    _, s1, diag = client_round(state, glob, 1, cfg, substream(11, 3, 3, 1))
    assert diag.client_id == 3 and diag.round_index == 1
    assert diag.alpha is not None
    assert LayerKey.ENC_DEC_PROJECTION in diag.selected
    assert set(diag.mean_fusion) == set(diag.selected)
    assert len(diag.epoch_losses) == 2
    assert diag.train_loss == pytest.approx(np.mean(diag.epoch_losses))
    assert len(s1.alpha_history) == 1
    assert set(s1.fusion_prior.keys()) == set(diag.selected)
    # second round: history grows, priors accumulate across rounds
    _, s2, _ = client_round(s1, glob, 2, cfg, substream(11, 3, 3, 2))
    assert len(s2.alpha_history) == 2
    assert set(s2.fusion_prior.keys()) >= set(diag.selected)
