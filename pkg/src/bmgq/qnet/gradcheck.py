"""Central finite-difference verification of ``backward``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from ..core import STATE_DIM
from ..matchgraph import MatchGraph
from .network import NetConfig, NetworkParams, backward, forward, init_params

DEFAULT_MODES = ("gat_transformer", "mean", "max")
# entries whose analytic and numeric values are both below this are compared absolutely
REL_FLOOR = 1e-6


def random_graph(rng: np.random.Generator, k: int = 8, in_dim: int = STATE_DIM) -> MatchGraph:
    n_real = int(rng.integers(2, k + 1))
    nodes = np.zeros((k, in_dim))
    slots = rng.permutation(k)[:n_real]
    nodes[slots] = rng.uniform(-1.0, 1.0, size=(n_real, in_dim))
    mask = np.zeros(k, dtype=bool)
    mask[slots] = True
    ids = tuple(int(i) if mask[i] else None for i in range(k))
    return MatchGraph(ego_index=int(slots[0]), nodes=nodes, real_mask=mask, source_ids=ids)


def random_params(config: NetConfig, rng: np.random.Generator) -> NetworkParams:
    p = init_params(config, rng)
    for name, a in p.items():
        if a.ndim == 1:
            a[:] = rng.normal(0.0, 0.1, size=a.shape)
    return p


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class GradcheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    n_checked: Dict[str, int] = field(default_factory=dict)
    worst_layer: Dict[str, str] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def check_instance(params: NetworkParams, graph: MatchGraph, upstream: np.ndarray, rng: np.random.Generator,
                   coords_per_layer: Optional[int] = 24, step: float = 1e-5, corrupt: bool = False):
    """Compare analytic and central-difference gradients of ``upstream . Q``.

    ``coords_per_layer=None`` checks every entry; otherwise a random subset of
    entries per layer plus one random direction through the whole layer.
    Yields ``(layer, max_rel_error, n_checks)``.
    """
    _, cache = forward(params, graph)
    grads = backward(params, cache, upstream)

    def loss():
        q, _ = forward(params, graph)
        return float(np.dot(upstream, q))

    for name, theta in params.items():
        g = grads[name].ravel().copy()
        if corrupt:
            g = g * 1.01 + 1e-3
        flat = theta.reshape(-1)
        if coords_per_layer is None or coords_per_layer >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords_per_layer, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = loss()
            flat[i] = old - step
            down = loss()
            flat[i] = old
            num[j] = (up - down) / (2 * step)
        errs = rel_error(g[idx], num)
        # directional derivative through the full layer
        direction = rng.normal(size=flat.size)
        direction /= np.linalg.norm(direction)
        old = flat.copy()
        flat[:] = old + step * direction
        up = loss()
        flat[:] = old - step * direction
        down = loss()
        flat[:] = old
        dir_num = (up - down) / (2 * step)
        dir_err = rel_error(np.array([g @ direction]), np.array([dir_num]))
        yield name, float(max(errs.max(), dir_err.max())), idx.size + 1


def gradient_check(seed: int = 0, trials: int = 20, modes: Iterable[str] = DEFAULT_MODES, k: int = 8,
                   coords_per_layer: Optional[int] = 24, corrupt: bool = False) -> GradcheckReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = GradcheckReport()
    for mode in modes:
        rng = np.random.default_rng([seed, sum(map(ord, mode))])
        cfg = NetConfig(aggregator=mode)
        worst, worst_layer, count = 0.0, "", 0
        for _ in range(trials):
            params = random_params(cfg, rng)
            graph = random_graph(rng, k=k)
            upstream = rng.normal(size=cfg.n_actions)
            for name, err, n in check_instance(params, graph, upstream, rng, coords_per_layer, corrupt=corrupt):
                count += n
                if err > worst:
                    worst, worst_layer = err, name
        report.max_rel_error[mode] = worst
        report.worst_layer[mode] = worst_layer
        report.n_checked[mode] = count
    return report
