"""Server-side orchestration: sampling, size-weighted averaging, round loop.

The server never holds a critic layer. Per-client work is keyed by
``(seed, client, round)`` rng streams and aggregation is canonicalized by
client id, so a round's outcome does not depend on the order participants
happen to execute in.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._seeding import DOMAIN_CLIENT, DOMAIN_MODEL, DOMAIN_SAMPLING, substream
from .agent_model import ModelConfig, greedy_trajectories, init_params
from .env_gen import HeterogeneityConfig, generate_client_dataset
from .metrics import MetricBundle, aggregate_metrics, evaluate_episode
from .param_space import LayerKey, ParamTree, strip_critic, weighted_average
from .personalization import MODES, ClientState, RoundDiagnostics, SelectionConfig, client_round

__all__ = [
    "FedConfig",
    "ExperimentConfig",
    "ServerState",
    "RoundRecord",
    "ExperimentResult",
    "sample_clients",
    "aggregate",
    "run_round",
    "evaluate_population",
    "run_experiment",
]

_MODE_CHOICES = MODES + ("no_layer",)


@dataclass(frozen=True)
class FedConfig:
    """Orchestration knobs for one federated run."""

    n_clients: int = 10
    participation: float = 0.2
    rounds: int = 150
    local_epochs: int = 5
    local_lr: float = 0.1
    il_rl_mix: float = 0.8
    batch_size: int = 8
    t_max: int = 12
    eval_every: int = 5
    checkpoint_every: int = 0
    target_loss: float | None = None
    mode: str = "pfednavi"
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.local_lr < 0.0:
            raise ValueError("local_lr must be non-negative")
        if not 0.0 <= self.il_rl_mix <= 1.0:
            raise ValueError("il_rl_mix must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.mode not in _MODE_CHOICES:
            raise ValueError(f"mode must be one of {_MODE_CHOICES}, got {self.mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs besides the seed."""

    fed: FedConfig = field(default_factory=FedConfig)
    env: HeterogeneityConfig = field(default_factory=HeterogeneityConfig)
    embed_dim: int = 24
    enc_hidden: int = 32
    dec_hidden: int = 32

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_environment(
            self.env,
            embed_dim=self.embed_dim,
            enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden,
            t_max=self.fed.t_max,
        )


@dataclass(frozen=True)
class RoundRecord:
    """What happened in one round; metrics only on evaluation rounds."""

    round_index: int
    participants: tuple[int, ...]
    train_loss: Mapping[int, float]
    mean_train_loss: float | None
    diagnostics: tuple[RoundDiagnostics, ...]
    upload_keys: Mapping[int, tuple[LayerKey, ...]]
    global_keys: tuple[LayerKey, ...]
    metrics: MetricBundle | None
    wall_time: float


@dataclass(frozen=True)
class ServerState:
    global_tree: ParamTree
    round_index: int = 0
    history: tuple[RoundRecord, ...] = ()

    def __post_init__(self):
        if LayerKey.CRITIC in self.global_tree:
            raise ValueError("the server tree must not contain the critic layer")


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    seed: int
    server: ServerState
    clients: Mapping[int, ClientState]
    records: tuple[RoundRecord, ...]
    rounds_to_target: int | None


def sample_clients(n_clients: int, participation: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw without replacement of ceil(participation * n) clients."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not 0.0 < participation <= 1.0:
        raise ValueError(f"participation must lie in (0, 1], got {participation}")
    k = math.ceil(participation * n_clients)
    picked = rng.choice(n_clients, size=k, replace=False)
    return tuple(sorted(int(i) for i in picked))


def aggregate(uploads: Sequence[tuple[int, ParamTree, int]]) -> ParamTree:
    """Size-weighted average of client uploads, canonicalized by client id."""
    if not uploads:
        raise ValueError("aggregate: no uploads")
    ordered = sorted(uploads, key=lambda u: u[0])
    return weighted_average([(tree, float(size)) for _, tree, size in ordered])


def run_round(
    server: ServerState,
    clients: Mapping[int, ClientState],
    config: FedConfig,
    seed: int,
) -> tuple[ServerState, dict[int, ClientState], RoundRecord]:
    """Advance one round; returns the new server, clients, and its record.

    The record carries no metrics; evaluation cadence is the experiment
    loop's business.
    """
    r = server.round_index + 1
    participants = sample_clients(
        config.n_clients, config.participation, substream(seed, DOMAIN_SAMPLING, r)
    )
    t0 = time.perf_counter()
    new_clients = dict(clients)
    uploads: list[tuple[int, ParamTree, int]] = []
    diags: list[RoundDiagnostics] = []
    losses: dict[int, float] = {}
    upload_keys: dict[int, tuple[LayerKey, ...]] = {}
    for cid in participants:
        rng = substream(seed, DOMAIN_CLIENT, cid, r)
        upload, state, diag = client_round(clients[cid], server.global_tree, r, config, rng)
        new_clients[cid] = state
        diags.append(diag)
        losses[cid] = diag.train_loss
        upload_keys[cid] = upload.keys()
        uploads.append((cid, upload, clients[cid].dataset.size))

    if config.mode == "local_only":
        new_global = server.global_tree  # nothing is shared in this mode
    else:
        new_global = aggregate(uploads)

    record = RoundRecord(
        round_index=r,
        participants=participants,
        train_loss=losses,
        mean_train_loss=float(np.mean([losses[c] for c in participants])),
        diagnostics=tuple(diags),
        upload_keys=upload_keys,
        global_keys=new_global.keys(),
        metrics=None,
        wall_time=time.perf_counter() - t0,
    )
    new_server = ServerState(
        global_tree=new_global, round_index=r, history=server.history + (record,)
    )
    return new_server, new_clients, record


def evaluate_population(
    global_tree: ParamTree,
    clients: Mapping[int, ClientState],
    mode: str,
    t_max: int,
) -> MetricBundle:
    """Greedy-rollout metrics on every client's held-out episodes.

    Personalized modes score each client's own full tree; the averaging
    baseline scores the shared tree. Greedy decoding never reads the value
    head, so the shared tree borrows each client's critic to satisfy the
    forward pass.
    """
    per_client: dict[int, list] = {}
    for cid in sorted(clients):
        state = clients[cid]
        if mode in ("fedavg", "no_layer"):
            model = global_tree.replace(LayerKey.CRITIC, state.local_tree[LayerKey.CRITIC])
        else:
            model = state.local_tree
        house = state.dataset.house
        episodes = state.dataset.eval_episodes
        trajs = greedy_trajectories(model, episodes, house, t_max)
        per_client[cid] = [
            evaluate_episode(traj, list(ep.path), ep.goal, house, house.success_radius)
            for traj, ep in zip(trajs, episodes)
        ]
    return aggregate_metrics(per_client)


def _with_metrics(server: ServerState, record: RoundRecord, bundle: MetricBundle):
    updated = dataclasses.replace(record, metrics=bundle)
    history = server.history[:-1] + (updated,)
    return dataclasses.replace(server, history=history), updated


def run_experiment(
    config: ExperimentConfig, seed: int, checkpoint_dir: str | None = None
) -> ExperimentResult:
    """One full federated run; bitwise reproducible from (config, seed).

    The initial model is drawn independently of the protocol mode, so runs
    that differ only in mode start from the same parameters. Evaluation
    happens before any training, every ``eval_every`` rounds, and on the
    final round.
    """
    fed = config.fed
    model_cfg = config.model_config()
    init = init_params(model_cfg, substream(seed, DOMAIN_MODEL))
    clients: dict[int, ClientState] = {}
    for cid in range(fed.n_clients):
        dataset = generate_client_dataset(cid, config.env, seed)
        clients[cid] = ClientState(client_id=cid, dataset=dataset, local_tree=init)

    t0 = time.perf_counter()
    bundle0 = evaluate_population(strip_critic(init), clients, fed.mode, fed.t_max)
    record0 = RoundRecord(
        round_index=0,
        participants=(),
        train_loss={},
        mean_train_loss=None,
        diagnostics=(),
        upload_keys={},
        global_keys=strip_critic(init).keys(),
        metrics=bundle0,
        wall_time=time.perf_counter() - t0,
    )
    server = ServerState(global_tree=strip_critic(init), round_index=0, history=(record0,))

    rounds_to_target: int | None = None
    for r in range(1, fed.rounds + 1):
        server, clients, record = run_round(server, clients, fed, seed)
        if r % fed.eval_every == 0 or r == fed.rounds:
            bundle = evaluate_population(server.global_tree, clients, fed.mode, fed.t_max)
            server, record = _with_metrics(server, record, bundle)
        if (
            rounds_to_target is None
            and fed.target_loss is not None
            and record.mean_train_loss is not None
            and record.mean_train_loss <= fed.target_loss
        ):
            rounds_to_target = r
        if checkpoint_dir is not None and fed.checkpoint_every > 0 and r % fed.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            server.global_tree.save(os.path.join(checkpoint_dir, f"server_round{r:04d}.pfnt"))

    return ExperimentResult(
        config=config,
        seed=seed,
        server=server,
        clients=clients,
        records=server.history,
        rounds_to_target=rounds_to_target,
    )
