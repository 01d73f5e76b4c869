"""Procedural client environments: houses, instruction styles, episode data.

Clients differ along four axes: house size (node count), connectivity
(branching factor), instruction style (token permutation plus filler-token
verbosity), and the path statistics those induce.  Houses are random
geometric graphs over room centers in a square; instructions are token-id
sequences produced from a fixed per-hop template, so no NLP machinery is
involved anywhere.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._seeding import DOMAIN_DATA, substream

__all__ = [
    "TOK_TURN",
    "TOK_GOTO",
    "TOK_STOP",
    "HEADING_BASE",
    "ROOM_BASE",
    "TOKENS_PER_HOP",
    "canonical_vocab_size",
    "HeterogeneityConfig",
    "HouseGraph",
    "InstructionStyle",
    "Episode",
    "ClientDataset",
    "generate_house",
    "shortest_path",
    "generate_episode",
    "generate_client_dataset",
    "dump_episodes",
    "load_episodes",
]

# Canonical token layout: two structural words, eight compass headings,
# STOP, then room tokens, then filler tokens.
TOK_TURN = 0
TOK_GOTO = 1
HEADING_BASE = 2
N_HEADINGS = 8
TOK_STOP = HEADING_BASE + N_HEADINGS
ROOM_BASE = TOK_STOP + 1
TOKENS_PER_HOP = 4  # turn <heading> go_to <room>


def canonical_vocab_size(n_room_types: int, filler_tokens: int) -> int:
    return ROOM_BASE + n_room_types + filler_tokens


@dataclass(frozen=True)
class HeterogeneityConfig:
    """Per-client environment draws; ranges collapse when ``heterogeneous`` is off."""

    heterogeneous: bool = True
    scale_range: tuple[int, int] = (8, 18)
    branching_range: tuple[float, float] = (1.5, 3.0)
    verbosity_range: tuple[float, float] = (0.0, 2.0)
    n_room_types: int = 6
    noise_dim: int = 4
    noise_sigma: float = 0.5
    filler_tokens: int = 6
    vocab_size: int = 48
    episodes_per_client: int = 50
    train_split: float = 0.8
    hop_range: tuple[int, int] = (2, 6)
    max_ref_hops: int = 10
    extent: float = 10.0
    success_radius: float = 0.25  # fraction of the house's mean edge length

    def __post_init__(self):
        if self.scale_range[0] < 4 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.branching_range[0] < 1.0:
            raise ValueError("branching factor must be >= 1")
        if not 0.0 < self.train_split < 1.0:
            raise ValueError("train_split must lie strictly inside (0, 1)")
        if self.episodes_per_client < 2:
            raise ValueError("need at least 2 episodes to split train/eval")
        need = canonical_vocab_size(self.n_room_types, self.filler_tokens)
        if self.vocab_size < need:
            raise ValueError(f"vocab_size {self.vocab_size} < canonical vocabulary {need}")
        if not 2 <= self.hop_range[0] <= self.hop_range[1]:
            raise ValueError(f"bad hop range {self.hop_range}")

    @property
    def obs_dim(self) -> int:
        return self.n_room_types + 2 + self.noise_dim

    @property
    def cand_dim(self) -> int:
        return 2 + self.obs_dim


@dataclass
class HouseGraph:
    """Navigation graph: rooms with coordinates, features, directed edges."""

    house_id: int
    coords: np.ndarray  # (n, 2) abstract meters
    room_types: np.ndarray  # (n,) int
    observations: np.ndarray  # (n, obs_dim)
    neighbors: tuple[tuple[int, ...], ...]  # sorted outgoing neighbor ids per node
    extent: float
    mean_edge_length: float
    success_radius: float
    _cand_feats: tuple[np.ndarray, ...] = field(repr=False, default=())
    _dist_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def candidates(self, node: int) -> tuple[int, ...]:
        """Candidate j=0 is STOP; candidates j>0 move to ``neighbors[j-1]``."""
        return (-1,) + self.neighbors[node]

    def candidate_features(self, node: int) -> np.ndarray:
        """(K, 2+obs_dim): zero heading+current obs for STOP, else heading+target obs."""
        return self._cand_feats[node]

    def euclid(self, a: int, b: int) -> float:
        return float(np.hypot(*(self.coords[a] - self.coords[b])))

    def geodesic_from(self, source: int) -> np.ndarray:
        """Euclidean-weighted Dijkstra distances from ``source`` to every node.

        Edges are symmetric by construction, so these double as distances
        *to* ``source``; cached per source node.
        """
        cached = self._dist_cache.get(source)
        if cached is not None:
            return cached
        n = self.n_nodes
        dist = np.full(n, np.inf)
        dist[source] = 0.0
        heap: list[tuple[float, int]] = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v in self.neighbors[u]:
                nd = d + self.euclid(u, v)
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        dist.setflags(write=False)
        self._dist_cache[source] = dist
        return dist

    def hop_distances(self, source: int) -> np.ndarray:
        """Unweighted BFS hop counts from ``source``."""
        hops = np.full(self.n_nodes, -1, dtype=np.int64)
        hops[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self.neighbors[u]:
                if hops[v] < 0:
                    hops[v] = hops[u] + 1
                    queue.append(v)
        return hops


@dataclass(frozen=True)
class InstructionStyle:
    """Client-specific rendering of canonical tokens."""

    client_id: int
    table: tuple[int, ...]  # canonical token id -> client token id, injective
    verbosity: float
    vocab_size: int

    def __post_init__(self):
        if len(set(self.table)) != len(self.table):
            raise ValueError("synonym table must be injective")
        if any(t < 0 or t >= self.vocab_size for t in self.table):
            raise ValueError("synonym table maps outside the vocabulary")
        if self.verbosity < 0:
            raise ValueError("verbosity must be >= 0")

    @classmethod
    def identity(cls, client_id: int, canonical_size: int, vocab_size: int,
                 verbosity: float = 0.0) -> "InstructionStyle":
        return cls(client_id, tuple(range(canonical_size)), verbosity, vocab_size)

    def render(self, canonical_tokens: Iterable[int]) -> tuple[int, ...]:
        return tuple(self.table[t] for t in canonical_tokens)


@dataclass(frozen=True)
class Episode:
    """One instruction with its reference trajectory."""

    instruction: tuple[int, ...]
    path: tuple[int, ...]
    goal: int
    house_id: int

    def __post_init__(self):
        if self.path[-1] != self.goal:
            raise ValueError("reference path must end at the goal")
        if len(self.instruction) < len(self.path):
            raise ValueError("instruction must carry at least one token per hop")


@dataclass(frozen=True)
class ClientDataset:
    house: HouseGraph
    style: InstructionStyle
    episodes: tuple[Episode, ...]
    train_indices: tuple[int, ...]
    eval_indices: tuple[int, ...]

    @property
    def train_episodes(self) -> tuple[Episode, ...]:
        return tuple(self.episodes[i] for i in self.train_indices)

    @property
    def eval_episodes(self) -> tuple[Episode, ...]:
        return tuple(self.episodes[i] for i in self.eval_indices)

    @property
    def size(self) -> int:
        """|D_i|: number of training episodes, the aggregation weight."""
        return len(self.train_indices)


def generate_house(
    seed: int,
    scale: int,
    complexity: float,
    *,
    n_room_types: int = 6,
    noise_dim: int = 4,
    noise_sigma: float = 0.5,
    extent: float = 10.0,
    success_radius_scale: float = 0.25,
) -> HouseGraph:
    """Random geometric house graph: ``scale`` rooms, mean out-degree ≈ ``complexity``.

    A nearest-neighbor spanning tree guarantees connectivity; remaining
    edges are added shortest-first until the degree target is met.  All
    edges are realized in both directions.
    """
    if scale < 4:
        raise ValueError("houses need at least 4 rooms")
    if complexity < 1.0:
        raise ValueError("branching factor must be >= 1")
    if complexity > scale - 1:
        raise ValueError(f"branching {complexity} impossible with {scale} rooms")

    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(scale, 2)) * extent
    room_types = rng.integers(0, n_room_types, size=scale)

    # nearest-previous-node tree keeps the graph connected and geometric
    edges: set[tuple[int, int]] = set()
    for i in range(1, scale):
        d = np.hypot(*(coords[:i] - coords[i]).T)
        j = int(np.argmin(d))
        edges.add((min(i, j), max(i, j)))

    target = max(scale - 1, int(round(complexity * scale / 2.0)))
    if target > len(edges):
        pairs = [
            (float(np.hypot(*(coords[u] - coords[v]))), u, v)
            for u in range(scale)
            for v in range(u + 1, scale)
            if (u, v) not in edges
        ]
        pairs.sort()
        for _, u, v in pairs[: target - len(edges)]:
            edges.add((u, v))

    adj: list[list[int]] = [[] for _ in range(scale)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    neighbors = tuple(tuple(sorted(a)) for a in adj)

    one_hot = np.zeros((scale, n_room_types))
    one_hot[np.arange(scale), room_types] = 1.0
    noise = rng.normal(0.0, noise_sigma, size=(scale, noise_dim))
    observations = np.concatenate([one_hot, coords / extent, noise], axis=1)

    lengths = [float(np.hypot(*(coords[u] - coords[v]))) for u, v in edges]
    mean_len = float(np.mean(lengths))

    house = HouseGraph(
        house_id=int(seed),
        coords=coords,
        room_types=room_types,
        observations=observations,
        neighbors=neighbors,
        extent=float(extent),
        mean_edge_length=mean_len,
        success_radius=float(success_radius_scale) * mean_len,
    )
    cand_feats = []
    for node in range(scale):
        rows = [np.concatenate([np.zeros(2), observations[node]])]
        for nb in neighbors[node]:
            heading = coords[nb] - coords[node]
            norm = float(np.hypot(*heading))
            heading = heading / norm if norm > 0 else heading
            rows.append(np.concatenate([heading, observations[nb]]))
        cand_feats.append(np.stack(rows))
    house._cand_feats = tuple(cand_feats)
    return house


def shortest_path(house: HouseGraph, src: int, dst: int) -> tuple[list[int], float]:
    """Minimal Euclidean-length path; ties broken toward the smallest next node id."""
    n = house.n_nodes
    if not (0 <= src < n and 0 <= dst < n):
        raise ValueError(f"node out of range: {src}->{dst} in a {n}-room house")
    dist = house.geodesic_from(dst)  # symmetric edges: distance-to-goal field
    if not np.isfinite(dist[src]):
        raise ValueError(f"no route from {src} to {dst}")
    path = [src]
    u = src
    while u != dst:
        # Dijkstra computed dist[u] as euclid(u, v*) + dist[v*] for some
        # neighbor, so exact float equality finds every optimal successor.
        nxt = None
        for v in house.neighbors[u]:
            if dist[v] + house.euclid(u, v) == dist[u]:
                nxt = v
                break
        if nxt is None:  # numeric guard; re-derive by argmin
            nxt = min(house.neighbors[u], key=lambda v: (dist[v] + house.euclid(u, v), v))
        path.append(nxt)
        u = nxt
    return path, float(dist[src])


def _heading_bucket(delta: np.ndarray) -> int:
    angle = float(np.arctan2(delta[1], delta[0]))  # [-pi, pi]
    sector = int(np.floor((angle + np.pi / N_HEADINGS) / (2 * np.pi / N_HEADINGS)))
    return sector % N_HEADINGS


def _canonical_instruction(
    house: HouseGraph, path: Sequence[int], verbosity: float,
    n_room_types: int, filler_tokens: int, rng: np.random.Generator,
) -> list[int]:
    filler_base = ROOM_BASE + n_room_types
    tokens: list[int] = []
    for u, v in zip(path[:-1], path[1:]):
        tokens.append(TOK_TURN)
        tokens.append(HEADING_BASE + _heading_bucket(house.coords[v] - house.coords[u]))
        tokens.append(TOK_GOTO)
        tokens.append(ROOM_BASE + int(house.room_types[v]))
        n_fill = int(rng.poisson(verbosity)) if filler_tokens else 0
        for _ in range(n_fill):
            tokens.append(filler_base + int(rng.integers(0, filler_tokens)))
    tokens.append(TOK_STOP)
    return tokens


def generate_episode(
    house: HouseGraph,
    style: InstructionStyle,
    rng: np.random.Generator,
    *,
    hop_range: tuple[int, int] = (2, 6),
    max_ref_hops: int = 10,
    n_room_types: int = 6,
    filler_tokens: int = 6,
) -> Episode:
    """Sample start/goal at hop distance in ``hop_range`` and describe the shortest path."""
    lo, hi = hop_range
    for _ in range(200):
        start = int(rng.integers(0, house.n_nodes))
        hops = house.hop_distances(start)
        eligible = np.flatnonzero((hops >= lo) & (hops <= hi))
        if eligible.size == 0:
            continue
        goal = int(eligible[int(rng.integers(0, eligible.size))])
        path, _ = shortest_path(house, start, goal)
        if len(path) - 1 > max_ref_hops:
            continue  # metric detour too long for the step budget; resample
        canonical = _canonical_instruction(
            house, path, style.verbosity, n_room_types, filler_tokens, rng
        )
        return Episode(
            instruction=style.render(canonical),
            path=tuple(path),
            goal=goal,
            house_id=house.house_id,
        )
    raise RuntimeError("could not sample an episode within the hop constraints")


def generate_client_dataset(
    client_id: int, config: HeterogeneityConfig, seed: int
) -> ClientDataset:
    """Deterministic per-(client, seed) dataset with the configured heterogeneity."""
    if config.episodes_per_client < 2:
        raise ValueError("need at least 2 episodes to split train/eval")
    draw = substream(seed, DOMAIN_DATA, client_id, 0)
    canon = canonical_vocab_size(config.n_room_types, config.filler_tokens)

    if config.heterogeneous:
        scale = int(draw.integers(config.scale_range[0], config.scale_range[1] + 1))
        branching = float(draw.uniform(*config.branching_range))
        verbosity = float(draw.uniform(*config.verbosity_range))
        house_seed = int(draw.integers(0, 2**31 - 1))
        perm = substream(seed, DOMAIN_DATA, client_id, 1).permutation(config.vocab_size)
        table = tuple(int(t) for t in perm[:canon])
    else:
        scale = int(round((config.scale_range[0] + config.scale_range[1]) / 2))
        branching = (config.branching_range[0] + config.branching_range[1]) / 2
        verbosity = config.verbosity_range[0]
        house_seed = int(substream(seed, DOMAIN_DATA, 10**6, 2).integers(0, 2**31 - 1))
        table = tuple(range(canon))

    house = generate_house(
        house_seed,
        scale,
        branching,
        n_room_types=config.n_room_types,
        noise_dim=config.noise_dim,
        noise_sigma=config.noise_sigma,
        extent=config.extent,
        success_radius_scale=config.success_radius,
    )
    style = InstructionStyle(client_id, table, verbosity, config.vocab_size)

    # degenerate config shares one episode stream so clients are truly IID
    # (identical datasets), which the round-one collapse checks rely on
    ep_path = (client_id, 3) if config.heterogeneous else (10**6, 3)
    ep_rng = substream(seed, DOMAIN_DATA, *ep_path)
    episodes = tuple(
        generate_episode(
            house,
            style,
            ep_rng,
            hop_range=config.hop_range,
            max_ref_hops=config.max_ref_hops,
            n_room_types=config.n_room_types,
            filler_tokens=config.filler_tokens,
        )
        for _ in range(config.episodes_per_client)
    )
    n = len(episodes)
    n_train = min(n - 1, max(1, int(round(n * config.train_split))))
    return ClientDataset(
        house=house,
        style=style,
        episodes=episodes,
        train_indices=tuple(range(n_train)),
        eval_indices=tuple(range(n_train, n)),
    )


def dump_episodes(episodes: Iterable[Episode], path) -> None:
    """One tab-separated record per episode: house id, goal, tokens, node path."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(
                f"{ep.house_id}\t{ep.goal}\t"
                f"{','.join(map(str, ep.instruction))}\t"
                f"{','.join(map(str, ep.path))}\n"
            )


def load_episodes(path) -> list[Episode]:
    out: list[Episode] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            house_id, goal, tokens, nodes = line.split("\t")
            out.append(
                Episode(
                    instruction=tuple(int(t) for t in tokens.split(",")),
                    path=tuple(int(t) for t in nodes.split(",")),
                    goal=int(goal),
                    house_id=int(house_id),
                )
            )
    return out
