"""Double-Q targets, the training step, and the per-variant training and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..policies import GreedyPolicy, QPolicy, pack_rows
from ..qnet.checkpoint import load_checkpoint, save_checkpoint
from ..qnet.network import NetConfig, NetworkParams, backward_batch, forward_batch, init_params
from ..qnet.optim import AdamState, adam_step, clip_gradient, polyak_update
from ..sim.engine import EpisodeMetrics, FeatureSpec, SimConfig, derive_seed, run_episode
from .replay import Batch, ReplayMemory

LOG = logging.getLogger(__name__)

VARIANTS = ("bmgq", "ilpddqn", "iql_can", "greedy")
CURVE_FIELDS = ("episode", "epsilon", "cumulative_reward", "loss_mean", "service_rate")
METRIC_FIELDS = ("cumulative_total_reward", "service_rate", "avg_waiting_min", "avg_detour_min",
                 "vehicle_km_traveled", "orders_served", "overestimation_bias")
EVAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "bmgq"
    aggregator: str = "gat_transformer"
    lr: float = 0.01
    rho: float = 0.005
    clip: float = 0.05
    eps0: float = 1.0
    eps_final: float = 0.005
    eps_decay: float = 0.996
    batch_size: int = 1024
    memory: int = 20_000
    warmup: Optional[int] = None  # experiences required before training; None = batch size
    episodes: int = 300
    seed: int = 0
    reward_scale: float = 1.0
    checkpoint_every: int = 50
    heads: int = 3
    hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.eps_decay < 1:
            raise ValueError("eps_decay must lie in (0, 1)")
        if not 0 <= self.eps_final <= self.eps0 <= 1:
            raise ValueError("need 0 <= eps_final <= eps0 <= 1")
        if self.batch_size > self.memory:
            raise ValueError("batch_size cannot exceed memory capacity")
        if self.warmup is not None and self.warmup < self.batch_size:
            raise ValueError("warmup must be at least batch_size")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")

    @property
    def warmup_size(self) -> int:
        return self.batch_size if self.warmup is None else self.warmup

    def features(self) -> FeatureSpec:
        if self.variant == "bmgq":
            return FeatureSpec(graph=True)
        return FeatureSpec(graph=False, neighbourhood_counts=self.variant == "iql_can")

    def net_config(self) -> NetConfig:
        f = self.features()
        agg = self.aggregator if self.variant == "bmgq" else "none"
        return NetConfig(in_dim=f.in_dim, hidden=self.hidden, heads=self.heads, head_width=2 * self.hidden,
                         aggregator=agg)

    def bias_mode(self):
        return "reject_q" if self.variant == "bmgq" else "none"


def epsilon_decay(eps: float, beta: float, eps_final: float) -> float:
    return max(eps * beta, eps_final)


def _option_rows(batch: Batch):
    """Rows for every next-state option: the null-candidate reject plus one accept per stored candidate."""
    b = len(batch)
    counts = 1 + batch.n_candidates
    owner = np.repeat(np.arange(b), counts)
    offsets = np.arange(owner.size) - np.repeat(np.cumsum(counts) - counts, counts)
    is_null = offsets == 0
    egos = np.where(is_null[:, None], batch.next_state[owner],
                    batch.next_candidates[owner, np.maximum(offsets - 1, 0)])
    action = np.where(is_null, 0, 1)
    return owner, egos, action


def td_targets(batch: Batch, online: NetworkParams, target: NetworkParams, gamma: float, k: int,
               mask_dummies: bool = False, reward_scale: float = 1.0) -> np.ndarray:
    """y = r for terminal transitions, else r + gamma * Q_target(s', a*) with a* chosen by the online net."""
    r = batch.reward * reward_scale
    live = ~batch.terminal
    y = r.copy()
    if not live.any() or gamma == 0.0:
        return y
    owner, egos, action = _option_rows(batch)
    nbrs = batch.next_neighbours[owner]
    n_real = batch.next_n_real[owner]
    gb_on = pack_rows(online, egos, nbrs, n_real, k, mask_dummies)
    q_on, _ = forward_batch(online, gb_on)
    q_tg, _ = forward_batch(target, pack_rows(target, egos, nbrs, n_real, k, mask_dummies))
    rows = np.arange(owner.size)
    sel_on = q_on[rows, action]
    sel_tg = q_tg[rows, action]
    best = np.full(len(batch), -np.inf)
    best_row = np.zeros(len(batch), dtype=np.int64)
    # first maximum wins (the null option comes first for each experience)
    for row in range(owner.size):
        e = owner[row]
        if sel_on[row] > best[e]:
            best[e] = sel_on[row]
            best_row[e] = row
    y[live] = r[live] + gamma * sel_tg[best_row[live]]
    return y


@dataclass
class StepOutcome:
    online: NetworkParams
    target: NetworkParams
    optimizer: AdamState
    loss: float


def train_step(memory: ReplayMemory, online: NetworkParams, target: NetworkParams, optimizer: AdamState,
               cfg: TrainConfig, sim: SimConfig, rng: np.random.Generator) -> Optional[StepOutcome]:
    """One mini-batch update; ``None`` while the memory holds fewer than the warm-up size."""
    if len(memory) < max(cfg.warmup_size, cfg.batch_size):
        return None
    batch = memory.sample(cfg.batch_size, rng)
    y = td_targets(batch, online, target, sim.gamma, sim.k_graph, sim.mask_dummies, cfg.reward_scale)
    gb = pack_rows(online, batch.state, batch.neighbours, batch.n_real, sim.k_graph, sim.mask_dummies)
    q, cache = forward_batch(online, gb)
    rows = np.arange(len(batch))
    err = q[rows, batch.action] - y
    loss = float(np.mean(err * err))
    upstream = np.zeros_like(q)
    upstream[rows, batch.action] = 2.0 * err / len(batch)
    grads = clip_gradient(backward_batch(online, cache, upstream), cfg.clip)
    new_online, new_opt = adam_step(online, grads, optimizer, cfg.lr)
    new_target = polyak_update(target, new_online, cfg.rho)
    return StepOutcome(new_online, new_target, new_opt, loss)


@dataclass
class TrainResult:
    curve: List[dict]
    online: Optional[NetworkParams]
    target: Optional[NetworkParams]
    optimizer: Optional[AdamState]
    checkpoints: List[Path] = field(default_factory=list)
    episode_metrics: List[dict] = field(default_factory=list)  # one EpisodeMetrics record per episode


def train(cfg: TrainConfig, sim: SimConfig, out_dir: Optional[Path] = None, progress=None) -> TrainResult:
    """Run ``cfg.episodes`` training episodes for one variant.

    Demand and fleet placement depend only on ``(cfg.seed, episode)``, so
    every variant sees the same episodes.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None and cfg.variant != "greedy":
        out_dir.mkdir(parents=True, exist_ok=True)
    curve: List[dict] = []
    records: List[dict] = []
    if cfg.variant == "greedy":
        policy = GreedyPolicy()
        for e in range(cfg.episodes):
            m, _ = run_episode(sim, policy, cfg.seed, e, record_experiences=False)
            curve.append(_curve_row(e, 0.0, m, []))
            records.append(m.as_record())
            if progress:
                progress(curve[-1])
        return TrainResult(curve, None, None, None, episode_metrics=records)
    net_cfg = cfg.net_config()
    features = cfg.features()
    online = init_params(net_cfg, np.random.default_rng(derive_seed(cfg.seed, 0, 10)))
    target = online.copy()
    optimizer = AdamState.fresh(online)
    memory = ReplayMemory(cfg.memory, features.in_dim, sim.k_graph - 1 if features.graph else 0,
                          sim.next_candidates)
    replay_rng = np.random.default_rng(derive_seed(cfg.seed, 0, 11))
    eps = cfg.eps0
    checkpoints: List[Path] = []
    policy = QPolicy(online, features, eps, cfg.bias_mode(), reward_scale=cfg.reward_scale)
    state = {"online": online, "target": target, "opt": optimizer}
    for e in range(cfg.episodes):
        eps = epsilon_decay(eps, cfg.eps_decay, cfg.eps_final)
        policy.epsilon = eps
        losses: List[float] = []

        def on_step(result):
            memory.extend(result.experiences)
            out = train_step(memory, state["online"], state["target"], state["opt"], cfg, sim, replay_rng)
            if out is not None:
                state.update(online=out.online, target=out.target, opt=out.optimizer)
                policy.params = out.online
                losses.append(out.loss)

        m, _ = run_episode(sim, policy, cfg.seed, e, features=features, on_step=on_step)
        curve.append(_curve_row(e, eps, m, losses))
        records.append(m.as_record())
        if progress:
            progress(curve[-1])
        if out_dir is not None and cfg.checkpoint_every and (e + 1) % cfg.checkpoint_every == 0:
            checkpoints.append(save_checkpoint(out_dir / f"checkpoint_ep{e + 1:04d}.ckpt", state["online"],
                                               state["opt"], _ckpt_meta(cfg, sim, e + 1)))
    if out_dir is not None:
        checkpoints.append(save_checkpoint(out_dir / "final.ckpt", state["online"], state["opt"],
                                           _ckpt_meta(cfg, sim, cfg.episodes)))
    return TrainResult(curve, state["online"], state["target"], state["opt"], checkpoints, records)


def _ckpt_meta(cfg: TrainConfig, sim: SimConfig, episode: int) -> dict:
    return {"variant": cfg.variant, "episode": episode, "reward_scale": cfg.reward_scale,
            "fingerprint": config_fingerprint(cfg, sim)}


def config_fingerprint(cfg: TrainConfig, sim: SimConfig) -> str:
    import hashlib
    import json

    payload = json.dumps({"train": asdict(cfg), "sim": asdict(sim)}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _curve_row(e: int, eps: float, m: EpisodeMetrics, losses: List[float]) -> dict:
    return {"episode": e, "epsilon": eps, "cumulative_reward": m.cumulative_total_reward,
            "loss_mean": float(np.mean(losses)) if losses else float("nan"), "service_rate": m.service_rate}


def make_policy(cfg: TrainConfig, params: Optional[NetworkParams], epsilon: float = 0.0):
    if cfg.variant == "greedy":
        return GreedyPolicy()
    if params is None:
        raise ValueError(f"variant {cfg.variant} needs network parameters")
    return QPolicy(params, cfg.features(), epsilon, cfg.bias_mode(), reward_scale=cfg.reward_scale)


def evaluate(params: Optional[NetworkParams], cfg: TrainConfig, sim: SimConfig, n_episodes: int,
             fleet_scale: float = 1.0, eval_seed: Optional[int] = None) -> dict:
    """Pure-exploitation runs on held-out demand seeds; mean and std of every metric."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if params is not None and params.config != cfg.net_config():
        raise ValueError(f"checkpoint network {params.config} does not match variant {cfg.variant}")
    if fleet_scale != 1.0:
        if sim.initial_positions:
            raise ValueError("fleet_scale cannot be combined with fixed initial_positions")
        sim = replace(sim, n_vehicles=int(round(sim.n_vehicles * fleet_scale)))
    policy = make_policy(cfg, params, 0.0)
    seed = cfg.seed + EVAL_SEED_OFFSET if eval_seed is None else eval_seed
    episodes = []
    for i in range(n_episodes):
        m, _ = run_episode(sim, policy, seed, i, record_experiences=False)
        episodes.append(m.as_record())
    summary = {"variant": cfg.variant, "n_episodes": n_episodes, "fleet_scale": fleet_scale,
               "n_vehicles": sim.n_vehicles, "eval_seed": seed}
    for name in METRIC_FIELDS:
        vals = [r[name] for r in episodes if r[name] is not None]
        summary[f"{name}_mean"] = float(np.mean(vals)) if vals else None
        summary[f"{name}_std"] = float(np.std(vals)) if vals else None
    summary["episodes"] = episodes
    return summary


def evaluate_checkpoint(path, cfg: TrainConfig, sim: SimConfig, n_episodes: int, fleet_scale: float = 1.0,
                        eval_seed: Optional[int] = None) -> dict:
    params, _, meta = load_checkpoint(path, expected=cfg.net_config())
    if meta.get("reward_scale", cfg.reward_scale) != cfg.reward_scale:
        cfg = replace(cfg, reward_scale=meta["reward_scale"])
    return evaluate(params, cfg, sim, n_episodes, fleet_scale, eval_seed)
