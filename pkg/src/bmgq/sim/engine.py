"""Episode engine: order lifecycle, decision epochs, experiences and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core import (STATE_DIM, GridCity, Order, OrderStatus, RewardParams, VehicleState, encode_state,
                    platform_reward, reward)
from ..dispatch import Assignment, ConstraintViolation, ScoreMatrix, check_assignment, solve_assignment
from ..matchgraph import DUMMY, build_adjacency, sample_neighbors
from ..router import GridRouter, PlanDelta, advance, apply_plan, best_insertion, straight_km

LOG = logging.getLogger(__name__)

# neighbourhood counts appended to the ego state for the IQL_CAN baseline are divided by this
CAN_COUNT_CAP = 10.0


@dataclass(frozen=True)
class SimConfig:
    width: int = 10
    height: int = 10
    zone_edge_km: float = 0.8
    speed_kmph: float = 16.8
    n_vehicles: int = 40
    capacity: int = 3
    r_match_km: float = 1.2
    dt: float = 1.0
    horizon: float = 30.0
    expiry_min: float = 5.0
    k_graph: int = 30
    next_candidates: int = 5
    gamma: float = 0.99
    demand_per_min: float = 3.0
    demand_pattern: str = "uniform"
    hotspots: Tuple[Tuple[int, int], ...] = ()
    hotspot_share: float = 0.7
    hotspot_radius: float = 1.5
    trips_csv: Optional[str] = None
    mask_dummies: bool = False
    # fixed start zones (one per vehicle); empty = uniform random by seed
    initial_positions: Tuple[Tuple[int, int], ...] = ()
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        ratio = self.horizon / self.dt
        if self.horizon <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("horizon must be a positive multiple of dt")
        if not self.expiry_min > 0:
            raise ValueError("expiry_min must be positive")
        if self.n_vehicles < 0 or self.capacity < 1 or self.k_graph < 1:
            raise ValueError("n_vehicles >= 0, capacity >= 1 and k_graph >= 1 required")
        if not self.r_match_km > 0:
            raise ValueError("r_match_km must be positive")
        if self.initial_positions and len(self.initial_positions) != self.n_vehicles:
            raise ValueError(f"initial_positions lists {len(self.initial_positions)} vehicles, n_vehicles is "
                             f"{self.n_vehicles}")

    @property
    def grid(self) -> GridCity:
        return GridCity(self.width, self.height, self.zone_edge_km, self.speed_kmph)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class FeatureSpec:
    """Which inputs the policy network consumes."""

    graph: bool = True
    neighbourhood_counts: bool = False  # IQL_CAN's two extra ego features

    @property
    def in_dim(self) -> int:
        return STATE_DIM + (2 if self.neighbourhood_counts else 0)


@dataclass
class Experience:
    vehicle_id: int
    time: float
    state: np.ndarray  # ego row (F,)
    neighbours: np.ndarray  # (K-1, F), real neighbours first then zeros
    n_real: int
    action: int  # 0 reject, 1 accept
    reward: float
    next_state: np.ndarray  # ego row with the null candidate
    next_neighbours: np.ndarray
    next_n_real: int
    next_candidates: np.ndarray  # (C, F) ego rows, one per next accept option
    terminal: bool


@dataclass
class EpisodeMetrics:
    cumulative_total_reward: float = 0.0
    service_rate: float = 1.0
    avg_waiting_min: float = 0.0
    avg_detour_min: float = 0.0
    vehicle_km_traveled: float = 0.0
    orders_served: int = 0
    overestimation_bias: Optional[float] = None
    total_requests: int = 0
    orders_expired: int = 0
    orders_open_at_end: int = 0
    constraint_checks: int = 0

    def as_record(self) -> dict:
        return asdict(self)


class Observation:
    """Everything a dispatcher may look at in one decision epoch."""

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.now = sim.now
        self.fleet: List[VehicleState] = list(sim.fleet)
        self.orders: List[Order] = [sim.orders[i] for i in sorted(sim.open_ids)]
        cfg = sim.config
        g = sim.grid
        self.null_enc = np.array([encode_state(v, None, self.now, g, cfg.horizon) for v in self.fleet]).reshape(
            len(self.fleet), STATE_DIM)
        self.adjacency = build_adjacency(self.fleet, cfg.r_match_km, g) if self.fleet else np.zeros((0, 0), bool)
        self.available = [i for i, v in enumerate(self.fleet) if v.available]
        self.vehicle_ids = [self.fleet[i].id for i in self.available]
        self.order_ids = [o.id for o in self.orders]
        feas = np.zeros((len(self.available), len(self.orders)), dtype=bool)
        self.pickup_km = np.full(feas.shape, np.inf)
        for a, i in enumerate(self.available):
            pos = self.fleet[i].position
            for j, o in enumerate(self.orders):
                d = straight_km(pos, o.origin, g)
                self.pickup_km[a, j] = d
                feas[a, j] = d <= cfg.r_match_km + 1e-12
        self.feasible = feas
        self._deltas: Dict[Tuple[int, int], PlanDelta] = {}
        self._counts = None
        rng = sim.stream("sampling")
        self.slots = []
        self.nbr_rows: List[np.ndarray] = []
        f = sim.features
        k = cfg.k_graph
        for i, v in enumerate(self.fleet):
            if f.graph:
                ids = [self.fleet[j].id for j in np.flatnonzero(self.adjacency[i])]
                slots = sample_neighbors(ids, k, rng, ego=v.id)
                idx = [sim.index[s] for s in slots if s is not DUMMY and s != v.id]
                rows = np.zeros((k - 1, STATE_DIM))
                if idx:
                    rows[:len(idx)] = self.null_enc[idx]
                self.slots.append(slots)
                self.nbr_rows.append(rows)
            else:
                self.slots.append([v.id])
                self.nbr_rows.append(np.zeros((0, STATE_DIM)))

    def n_real(self, i: int) -> int:
        return sum(1 for s in self.slots[i] if s is not DUMMY)

    def neighbourhood_counts(self, i: int) -> np.ndarray:
        if self._counts is None:
            cfg = self.sim.config
            agents = self.adjacency.sum(axis=1) - 1 if len(self.fleet) else np.zeros(0)
            reqs = np.zeros(len(self.fleet))
            for vi, v in enumerate(self.fleet):
                reqs[vi] = sum(1 for o in self.orders
                               if straight_km(v.position, o.origin, self.sim.grid) <= cfg.r_match_km + 1e-12)
            self._counts = np.stack([np.minimum(agents / CAN_COUNT_CAP, 1.0),
                                     np.minimum(reqs / CAN_COUNT_CAP, 1.0)], axis=1)
        return self._counts[i]

    def ego_row(self, i: int, order: Optional[Order]) -> np.ndarray:
        """Ego features of fleet slot ``i`` with ``order`` as the candidate (None = null)."""
        v = self.fleet[i]
        base = self.null_enc[i] if order is None else encode_state(v, order, self.now, self.sim.grid,
                                                                   self.sim.config.horizon)
        if self.sim.features.neighbourhood_counts:
            return np.concatenate([base, self.neighbourhood_counts(i)])
        return base

    def delta(self, vehicle_id: int, order_id: int) -> PlanDelta:
        key = (vehicle_id, order_id)
        if key not in self._deltas:
            v = self.fleet[self.sim.index[vehicle_id]]
            self._deltas[key] = best_insertion(v, self.sim.orders[order_id], self.now, self.sim.router)
        return self._deltas[key]

    def accept_reward(self, vehicle_id: int, order_id: int) -> float:
        d = self.delta(vehicle_id, order_id)
        o = self.sim.orders[order_id]
        dis = self.sim.router.distance_km(o.origin, o.destination)
        return reward("accept", dis, d.pickup_time, d.add_time, self.sim.config.reward)

    def candidates_for(self, i: int, limit: int) -> List[Order]:
        """Up to ``limit`` nearest feasible open orders for fleet slot ``i`` (ties by id)."""
        v = self.fleet[i]
        if not v.available:
            return []
        g = self.sim.grid
        r = self.sim.config.r_match_km
        scored = []
        for o in self.orders:
            d = straight_km(v.position, o.origin, g)
            if d <= r + 1e-12:
                scored.append((d, o.id, o))
        scored.sort(key=lambda t: (t[0], t[1]))
        return [o for _, _, o in scored[:limit]]


@dataclass
class StepResult:
    experiences: List[Experience]
    rewards: np.ndarray  # per fleet slot
    platform_reward: float
    done: bool


def derive_seed(*key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(k) for k in key])


_STREAMS = {"demand": 0, "fleet": 1, "sampling": 2, "explore": 3}


class Simulator:
    """Mutable episode driver over immutable vehicle and order values."""

    def __init__(self, config: SimConfig, orders: Sequence[Order], seed: int, episode: int = 0,
                 features: FeatureSpec = FeatureSpec(), initial_positions=None, record_experiences: bool = True):
        self.config = config
        self.grid = config.grid
        self.router = GridRouter(self.grid)
        self.seed = seed
        self.episode = episode
        self.features = features
        self.record_experiences = record_experiences
        self.step_index = 0
        self.now = 0.0
        self.orders: Dict[int, Order] = {}
        self._pending = sorted((o for o in orders if o.request_time < config.horizon),
                               key=lambda o: (o.request_time, o.id))
        if len({o.id for o in self._pending}) != len(self._pending):
            raise ValueError("order ids must be unique")
        self.total_requests = len(self._pending)
        self.open_ids: set = set()
        if initial_positions is None and config.initial_positions:
            initial_positions = config.initial_positions
        if initial_positions is None:
            rng = np.random.default_rng(derive_seed(seed, episode, _STREAMS["fleet"]))
            zones = rng.integers(0, self.grid.n_zones, size=config.n_vehicles)
            initial_positions = [(float(z % self.grid.width), float(z // self.grid.width)) for z in zones]
        if len(initial_positions) != config.n_vehicles:
            raise ValueError("initial_positions must list one position per vehicle")
        self.fleet: List[VehicleState] = [VehicleState(id=i, position=(float(p[0]), float(p[1])),
                                                       capacity=config.capacity)
                                          for i, p in enumerate(initial_positions)]
        self.index = {v.id: i for i, v in enumerate(self.fleet)}
        self.waits: List[float] = []
        self.wait_by_order: Dict[int, float] = {}
        self.detours: List[float] = []
        self.step_rewards: List[np.ndarray] = []
        self.platform_rewards: List[float] = []
        self.constraint_checks = 0
        self._reveal()
        self.obs = Observation(self) if not self.done else None

    @property
    def done(self) -> bool:
        return self.step_index >= self.config.n_steps

    def stream(self, name: str) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, self.episode, self.step_index, _STREAMS[name]))

    def _reveal(self) -> None:
        while self._pending and self._pending[0].request_time <= self.now + 1e-9:
            o = self._pending.pop(0)
            self.orders[o.id] = o
            self.open_ids.add(o.id)
        for oid in sorted(self.open_ids):
            o = self.orders[oid]
            if o.age(self.now) > self.config.expiry_min + 1e-9:
                self.orders[oid] = o.with_status(OrderStatus.EXPIRED)
                self.open_ids.discard(oid)

    def observe(self) -> Observation:
        if self.obs is None:
            raise RuntimeError("episode finished")
        return self.obs

    def step(self, assignment: Assignment, scores: Optional[ScoreMatrix] = None) -> StepResult:
        """Apply one epoch's assignment, move the fleet ``dt`` minutes and refresh orders."""
        obs = self.observe()
        cfg = self.config
        if scores is None:
            scores = ScoreMatrix.empty(obs.vehicle_ids, obs.order_ids)
            scores.feasible = obs.feasible
        check_assignment(assignment, scores)
        rows = {vid: a for a, vid in enumerate(obs.vehicle_ids)}
        cols = {oid: j for j, oid in enumerate(obs.order_ids)}
        for vid, oid in assignment.matched().items():
            if vid not in rows or not obs.fleet[self.index[vid]].available:
                raise ConstraintViolation(f"vehicle {vid} is not available")
            # the policy's matrix is not trusted for the radius constraint
            if oid not in cols or not obs.feasible[rows[vid], cols[oid]]:
                raise ConstraintViolation(f"pair ({vid}, {oid}) violates the matching radius")
        self.constraint_checks += 1
        # only vehicles offered at least one feasible order faced a decision
        faced = {obs.vehicle_ids[a] for a in range(len(obs.vehicle_ids)) if obs.feasible[a].any()}
        rewards = np.empty(len(self.fleet))
        pending_exp = []
        new_fleet = []
        for i, v in enumerate(obs.fleet):
            oid = assignment.order_of(v.id)
            if oid is not None:
                order = self.orders[oid]
                if order.status is not OrderStatus.OPEN:
                    raise ConstraintViolation(f"order {oid} is {order.status.value}, not open")
                delta = obs.delta(v.id, oid)
                if not delta.feasible:
                    raise ConstraintViolation(f"vehicle {v.id} cannot serve order {oid}")
                rewards[i] = obs.accept_reward(v.id, oid)
                self.orders[oid] = order.with_status(OrderStatus.ASSIGNED)
                self.open_ids.discard(oid)
                v = apply_plan(v, delta, self.now, self.router)
                state = obs.ego_row(i, order)
                action = 1
            else:
                rewards[i] = reward("reject", 0.0, 0.0, 0.0, cfg.reward)
                state = obs.ego_row(i, None)
                action = 0
            new_fleet.append(v)
            if self.record_experiences and v.id in faced:
                pending_exp.append((i, state, action))
        moved = []
        for v in new_fleet:
            nv, events = advance(v, cfg.dt, self.router, now=self.now)
            for ev in events:
                o = self.orders[ev.order_id]
                if ev.kind == "pickup":
                    self.orders[ev.order_id] = o.with_status(OrderStatus.ONBOARD)
                    self.waits.append(ev.wait_time)
                    self.wait_by_order[ev.order_id] = ev.wait_time
                else:
                    self.orders[ev.order_id] = o.with_status(OrderStatus.COMPLETED)
                    self.detours.append(ev.detour)
            if len(nv.onboard) + int(nv.pickup_pending) > nv.capacity:
                raise ConstraintViolation(f"vehicle {nv.id} over capacity")
            nv.check_invariants()
            moved.append(nv)
        self.fleet = moved
        total = platform_reward(rewards.tolist())
        self.step_rewards.append(rewards)
        self.platform_rewards.append(total)
        self.step_index += 1
        self.now = self.step_index * cfg.dt
        self._reveal()
        self.obs = None if self.done else Observation(self)
        experiences = [self._experience(obs, i, state, action, float(rewards[i]))
                       for i, state, action in pending_exp]
        return StepResult(experiences, rewards, total, self.done)

    def _experience(self, obs: Observation, i: int, state, action: int, r: float) -> Experience:
        nxt = self.obs
        v = obs.fleet[i]
        f = self.features.in_dim
        if nxt is None:
            next_state = np.zeros(f)
            next_nbrs = np.zeros_like(obs.nbr_rows[i])
            next_real = 1
            cands = np.zeros((0, f))
        else:
            next_state = nxt.ego_row(i, None)
            next_nbrs = nxt.nbr_rows[i]
            next_real = nxt.n_real(i)
            opts = nxt.candidates_for(i, self.config.next_candidates)
            cands = np.array([nxt.ego_row(i, o) for o in opts]).reshape(len(opts), f)
        return Experience(vehicle_id=v.id, time=obs.now, state=state, neighbours=obs.nbr_rows[i],
                          n_real=obs.n_real(i), action=action, reward=r, next_state=next_state,
                          next_neighbours=next_nbrs, next_n_real=next_real, next_candidates=cands,
                          terminal=nxt is None)

    def metrics(self) -> EpisodeMetrics:
        statuses = [o.status for o in self.orders.values()]
        served = sum(s in (OrderStatus.ONBOARD, OrderStatus.COMPLETED) for s in statuses)
        expired = sum(s is OrderStatus.EXPIRED for s in statuses)
        still = self.total_requests - served - expired
        return EpisodeMetrics(
            cumulative_total_reward=math.fsum(self.platform_rewards),
            service_rate=served / self.total_requests if self.total_requests else 1.0,
            avg_waiting_min=float(np.mean(self.waits)) if self.waits else 0.0,
            avg_detour_min=float(np.mean(self.detours)) if self.detours else 0.0,
            vehicle_km_traveled=float(np.mean([v.km_traveled for v in self.fleet])) if self.fleet else 0.0,
            orders_served=served,
            total_requests=self.total_requests,
            orders_expired=expired,
            orders_open_at_end=still,
            constraint_checks=self.constraint_checks,
        )


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Per (step, vehicle) discounted reward-to-go of a (T, N) reward stream, truncated at the horizon."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class EpisodeTrace:
    rewards: np.ndarray  # (T, N)
    decisions: List[Tuple[int, int, float]]  # (step, fleet slot, predicted Q of the taken accept)
    gamma: float


def measure_overestimation(trace: EpisodeTrace) -> float:
    """Mean of predicted Q minus realised discounted return over accepted decisions."""
    if not trace.decisions:
        raise ValueError("trace holds no accepted decisions with predictions")
    g = discounted_returns(trace.rewards, trace.gamma)
    return float(np.mean([q - g[t, i] for t, i, q in trace.decisions]))


def build_orders(config: SimConfig, seed: int, episode: int) -> List[Order]:
    from .demand import demand_rates, load_trips, synth_demand

    grid = config.grid
    if config.trips_csv:
        return load_trips(config.trips_csv, grid)
    rates = demand_rates(grid, config.demand_per_min, config.demand_pattern, config.hotspots or None,
                         config.hotspot_share, config.hotspot_radius)
    return synth_demand(rates, config.horizon, derive_seed(seed, episode, _STREAMS["demand"]), grid)


def run_episode(config: SimConfig, policy, seed: int, episode: int = 0, features: Optional[FeatureSpec] = None,
                orders: Optional[Sequence[Order]] = None, initial_positions=None, on_step=None,
                record_experiences: bool = True):
    """Run one full horizon; returns ``(EpisodeMetrics, experiences)``.

    ``policy.scores(obs, rng)`` must return ``(ScoreMatrix, predictions)``
    where ``predictions`` maps ``(vehicle_id, order_id)`` to the predicted
    accept value (empty for reward-based dispatch).  ``on_step(result)`` is
    called after every epoch.
    """
    features = features or getattr(policy, "features", FeatureSpec())
    if orders is None:
        orders = build_orders(config, seed, episode)
    sim = Simulator(config, orders, seed, episode, features, initial_positions, record_experiences)
    experiences: List[Experience] = []
    decisions: List[Tuple[int, int, float]] = []
    while not sim.done:
        obs = sim.observe()
        scores, predictions = policy.scores(obs, sim.stream("explore"))
        assignment = solve_assignment(scores)
        for vid, oid in assignment.matched().items():
            if (vid, oid) in predictions:
                decisions.append((sim.step_index, sim.index[vid], predictions[(vid, oid)]))
        result = sim.step(assignment, scores)
        experiences.extend(result.experiences)
        if on_step is not None:
            on_step(result)
    metrics = sim.metrics()
    if decisions:
        metrics.overestimation_bias = measure_overestimation(
            EpisodeTrace(np.array(sim.step_rewards), decisions, config.gamma))
    return metrics, experiences
