"""Localized bipartite match graphs: adjacency, fixed-size sampling, node encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import STATE_DIM, GridCity, Order, VehicleState, encode_state

DUMMY = None  # marker for a padded slot in a sampled neighbour list


@dataclass(frozen=True)
class MatchGraph:
    ego_index: int
    nodes: np.ndarray  # (K, F)
    real_mask: np.ndarray  # (K,) bool
    source_ids: tuple  # K entries, vehicle id or None

    def __post_init__(self):
        k = self.nodes.shape[0]
        if self.real_mask.shape != (k,) or len(self.source_ids) != k:
            raise ValueError("MatchGraph fields disagree on K")
        if not 0 <= self.ego_index < k or not self.real_mask[self.ego_index]:
            raise ValueError("ego node must be a real node")

    @property
    def k(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_real(self) -> int:
        return int(self.real_mask.sum())


def build_adjacency(fleet: Sequence[VehicleState], r_match: float, grid: GridCity) -> np.ndarray:
    """Boolean N x N matrix, true where two vehicles are within ``r_match`` km (Euclidean)."""
    if not r_match > 0:
        raise ValueError("r_match must be positive")
    if not fleet:
        return np.zeros((0, 0), dtype=bool)
    pos = np.array([v.position for v in fleet], dtype=np.float64) * grid.zone_edge_km
    d = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    adj = d <= r_match + 1e-12
    np.fill_diagonal(adj, True)
    return adj


def sample_neighbors(neighbor_ids: Sequence, k: int, rng: np.random.Generator, ego=None) -> list:
    """Exactly ``k`` slots: a uniform subset when crowded, dummy padding when sparse.

    ``ego`` (if given and present) always survives downsampling and keeps the
    first slot; the other entries keep their input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = list(neighbor_ids)
    if ego is not None and ego in ids:
        others = [i for i in ids if i != ego]
        head = [ego]
    else:
        others, head = ids, []
    room = k - len(head)
    if len(others) > room:
        pick = np.sort(rng.choice(len(others), size=room, replace=False))
        others = [others[i] for i in pick]
    out = head + others
    return out + [DUMMY] * (k - len(out))


def build_match_graph(
    ego: VehicleState,
    candidate: Optional[Order],
    fleet: Sequence[VehicleState],
    r_match: float,
    k: int,
    now: float,
    rng: np.random.Generator,
    grid: GridCity,
    horizon: float,
    adjacency: Optional[np.ndarray] = None,
) -> MatchGraph:
    """Graph centred on ``ego``: ego carries the candidate, neighbours the null candidate."""
    index = {v.id: i for i, v in enumerate(fleet)}
    if ego.id not in index:
        raise ValueError(f"vehicle {ego.id} is not part of the fleet")
    adj = build_adjacency(fleet, r_match, grid) if adjacency is None else adjacency
    row = adj[index[ego.id]]
    nbr_ids = [fleet[j].id for j in np.flatnonzero(row)]
    slots = sample_neighbors(nbr_ids, k, rng, ego=ego.id)
    return graph_from_slots(ego, candidate, slots, fleet, now, grid, horizon)


def graph_from_slots(ego, candidate, slots, fleet, now, grid, horizon) -> MatchGraph:
    by_id = {v.id: v for v in fleet}
    k = len(slots)
    nodes = np.zeros((k, STATE_DIM), dtype=np.float64)
    mask = np.zeros(k, dtype=bool)
    for i, vid in enumerate(slots):
        if vid is DUMMY:
            continue
        mask[i] = True
        veh = by_id[vid]
        nodes[i] = encode_state(veh, candidate if vid == ego.id else None, now, grid, horizon)
    return MatchGraph(ego_index=slots.index(ego.id), nodes=nodes, real_mask=mask, source_ids=tuple(slots))
