"""Trajectory evaluation metrics for navigation episodes.

Six per-episode scores compare the walk an agent actually took against the
reference shortest path on the house geometry: success rate (SR), success
weighted by path length (SPL), oracle success rate (OSR), navigation error
(NE), normalized dynamic time warping (nDTW), and coverage weighted by
length score (CLS).  Everything here is a pure function of node sequences
and house coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .env_gen import HouseGraph, shortest_path

METRIC_KEYS = ("sr", "spl", "osr", "cls", "ndtw", "ne")
# Every key except navigation error is reported on a 0..100 scale.
PERCENT_KEYS = ("sr", "spl", "osr", "cls", "ndtw")


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    spl: float
    oracle_success: bool
    ne: float
    cls: float
    ndtw: float


@dataclass(frozen=True)
class MetricBundle:
    """Scores averaged per client first, then across clients without weights."""

    episodes: tuple[EpisodeMetrics, ...]
    client_means: dict[int, dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]


def walk_length(house: HouseGraph, nodes: Sequence[int]) -> float:
    """Summed Euclidean edge length of a node walk; 0.0 for a single node."""
    total = 0.0
    for a, b in zip(nodes, nodes[1:]):
        total += house.euclid(a, b)
    return total


def dtw_distance(predicted: Sequence[int], reference: Sequence[int],
                 house: HouseGraph) -> float:
    """Dynamic time warping cost between two node sequences.

    Standard quadratic dynamic program over monotone alignments with unit
    steps (advance either sequence or both), Euclidean node distance as the
    local cost.  Both endpoints must be matched, so the cost of identical
    sequences is exactly zero.
    """
    if len(predicted) == 0 or len(reference) == 0:
        raise ValueError("dtw_distance: empty node sequence")
    pc = house.coords[np.asarray(predicted, dtype=np.int64)]
    rc = house.coords[np.asarray(reference, dtype=np.int64)]
    cost = np.hypot(pc[:, None, 0] - rc[None, :, 0], pc[:, None, 1] - rc[None, :, 1])
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        for j in range(1, m):
            acc[i, j] = cost[i, j] + min(acc[i - 1, j], acc[i, j - 1],
                                         acc[i - 1, j - 1])
    return float(acc[n - 1, m - 1])


def evaluate_episode(predicted: Sequence[int], reference: Sequence[int],
                     goal: int, house: HouseGraph,
                     success_radius: float) -> EpisodeMetrics:
    """Score one episode.

    ``predicted`` is the walk the agent took, ``reference`` the shortest
    start-to-goal path; both are node id sequences on ``house``.  The
    success radius doubles as the distance scale inside nDTW and CLS.
    """
    if len(predicted) == 0 or len(reference) == 0:
        raise ValueError("evaluate_episode: empty node sequence")
    ne = house.euclid(predicted[-1], goal)
    success = ne <= success_radius
    oracle_success = min(house.euclid(v, goal) for v in predicted) <= success_radius

    p = walk_length(house, predicted)
    if not success:
        spl = 0.0
    elif p == 0.0:
        spl = 1.0
    else:
        # Shortest length summed in walk order so that a predicted path equal
        # to the canonical shortest path scores exactly 1.
        optimal, _ = shortest_path(house, predicted[0], goal)
        shortest_len = walk_length(house, optimal)
        spl = shortest_len / max(p, shortest_len)

    ndtw = math.exp(-dtw_distance(predicted, reference, house)
                    / (len(reference) * success_radius))

    # Coverage of the reference by the walk, then a length penalty anchored
    # at the coverage-expected path length.
    nearest = [min(house.euclid(r, q) for q in predicted) for r in reference]
    pc = sum(math.exp(-d / success_radius) for d in nearest) / len(reference)
    epl = pc * walk_length(house, reference)
    denom = epl + abs(epl - p)
    pl_score = 1.0 if denom == 0.0 else epl / denom
    cls_value = pc * pl_score

    return EpisodeMetrics(success=success, spl=spl, oracle_success=oracle_success,
                          ne=ne, cls=cls_value, ndtw=ndtw)


def _episode_row(m: EpisodeMetrics) -> dict[str, float]:
    return {
        "sr": 100.0 * float(m.success),
        "spl": 100.0 * m.spl,
        "osr": 100.0 * float(m.oracle_success),
        "cls": 100.0 * m.cls,
        "ndtw": 100.0 * m.ndtw,
        "ne": m.ne,
    }


def aggregate_metrics(
        per_client: Mapping[int, Sequence[EpisodeMetrics]]) -> MetricBundle:
    """Average per client first, then unweighted across clients.

    Cross-client spread is the population standard deviation, so two clients
    scoring 100 and 0 read as mean 50, std 50.
    """
    if not per_client:
        raise ValueError("aggregate_metrics: no clients")
    episodes: list[EpisodeMetrics] = []
    client_means: dict[int, dict[str, float]] = {}
    for cid in sorted(per_client):
        rows = [_episode_row(m) for m in per_client[cid]]
        if not rows:
            raise ValueError(f"aggregate_metrics: client {cid} has no episodes")
        episodes.extend(per_client[cid])
        client_means[cid] = {
            k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS
        }
    order = sorted(client_means)
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for k in METRIC_KEYS:
        vals = np.array([client_means[cid][k] for cid in order])
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return MetricBundle(episodes=tuple(episodes), client_means=client_means,
                        mean=mean, std=std)
