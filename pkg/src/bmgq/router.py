"""Deterministic grid travel times and ride-pooling route insertion.

Vehicles move at constant speed on a rectilinear grid, covering the x
component of every leg before the y component.  ``GridRouter`` is the only
router shipped; anything exposing the ``Router`` protocol can replace it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Protocol, Sequence, Tuple

from .core import Coord, GridCity, Order, PassengerOnBoard, Stop, VehicleState

EPS = 1e-9


class Router(Protocol):
    grid: GridCity

    def travel_time(self, a: Sequence[float], b: Sequence[float]) -> float: ...

    def distance_km(self, a: Sequence[float], b: Sequence[float]) -> float: ...

    def move_towards(self, a: Sequence[float], b: Sequence[float], minutes: float) -> Coord: ...


class GridRouter:
    """Manhattan-metric router over a ``GridCity``."""

    def __init__(self, grid: GridCity):
        self.grid = grid
        self._min_per_zone = grid.zone_edge_km / grid.speed_kmph * 60.0

    def _check(self, p):
        if not self.grid.contains(p):
            raise ValueError(f"coordinate {tuple(p)} outside {self.grid.width}x{self.grid.height} grid")

    def zone_distance(self, a, b) -> float:
        self._check(a)
        self._check(b)
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    def distance_km(self, a, b) -> float:
        return self.zone_distance(a, b) * self.grid.zone_edge_km

    def travel_time(self, a, b) -> float:
        return self.zone_distance(a, b) * self._min_per_zone

    def move_towards(self, a, b, minutes: float) -> Coord:
        """Position after travelling ``minutes`` from a to b (x leg first)."""
        budget = minutes / self._min_per_zone
        x, y = float(a[0]), float(a[1])
        dx = b[0] - x
        step = min(abs(dx), budget)
        x += math.copysign(step, dx) if dx else 0.0
        budget -= step
        dy = b[1] - y
        step = min(abs(dy), max(budget, 0.0))
        y += math.copysign(step, dy) if dy else 0.0
        return (x, y)


def travel_time(a, b, grid: GridCity) -> float:
    return GridRouter(grid).travel_time(a, b)


def straight_km(a, b, grid: GridCity) -> float:
    """Euclidean distance in km; used for the matching radius."""
    return math.hypot(a[0] - b[0], a[1] - b[1]) * grid.zone_edge_km


@dataclass(frozen=True)
class PlanDelta:
    feasible: bool
    pickup_time: float = 0.0
    new_stop_plan: Tuple[Stop, ...] = ()
    added_delay_per_onboard: Dict[int, float] = field(default_factory=dict)
    new_passenger_detour: float = 0.0
    added_distance_km: float = 0.0
    completion_time: float = 0.0

    @property
    def add_time(self) -> float:
        """Total pooling delay fed into the reward: new rider's detour plus delays imposed on riders aboard."""
        return self.new_passenger_detour + math.fsum(self.added_delay_per_onboard.values())


def plan_times(start: Sequence[float], stops: Sequence[Stop], router: Router) -> List[float]:
    """Cumulative arrival time (minutes from now) at each stop."""
    out = []
    t = 0.0
    pos = start
    for s in stops:
        t += router.travel_time(pos, s.location)
        out.append(t)
        pos = s.location
    return out


def plan_distance_km(start: Sequence[float], stops: Sequence[Stop], router: Router) -> float:
    d = 0.0
    pos = start
    for s in stops:
        d += router.distance_km(pos, s.location)
        pos = s.location
    return d


def _objective(times: List[float], stops: Sequence[Stop]) -> Tuple[float, float]:
    # makespan first, then the summed dropoff times
    if not times:
        return (0.0, 0.0)
    return (times[-1], math.fsum(t for t, s in zip(times, stops) if s.kind == "dropoff"))


def _as_router(grid_or_router) -> Router:
    if isinstance(grid_or_router, GridCity):
        return GridRouter(grid_or_router)
    return grid_or_router


def new_stops_for(order: Order) -> Tuple[Stop, Stop]:
    return (
        Stop("pickup", order.id, tuple(order.origin), order.request_time, order.direct_time),
        Stop("dropoff", order.id, tuple(order.destination), order.request_time, order.direct_time),
    )


def evaluate_plan(vehicle: VehicleState, order: Order, now: float, stops: Sequence[Stop], router: Router) -> PlanDelta:
    """Build the ``PlanDelta`` for one concrete ordering containing the new order's stops."""
    times = plan_times(vehicle.position, stops, router)
    old_times = plan_times(vehicle.position, vehicle.stop_plan, router)
    old_drop = {s.order_id: t for s, t in zip(vehicle.stop_plan, old_times) if s.kind == "dropoff"}
    t_pick = t_drop = None
    delays = {}
    for s, t in zip(stops, times):
        if s.order_id == order.id:
            if s.kind == "pickup":
                t_pick = t
            else:
                t_drop = t
        elif s.kind == "dropoff" and s.order_id in old_drop:
            delays[s.order_id] = max(0.0, t - old_drop[s.order_id])
    detour = max(0.0, (t_drop - t_pick) - order.direct_time)
    added_km = plan_distance_km(vehicle.position, stops, router) - plan_distance_km(vehicle.position, vehicle.stop_plan, router)
    return PlanDelta(
        feasible=True,
        pickup_time=(now - order.request_time) + t_pick,
        new_stop_plan=tuple(stops),
        added_delay_per_onboard=delays,
        new_passenger_detour=detour,
        added_distance_km=max(0.0, added_km),
        completion_time=times[-1],
    )


def best_insertion(vehicle: VehicleState, order: Order, now: float, grid) -> PlanDelta:
    """Cheapest way to serve ``order`` with ``vehicle``.

    Every reordering of the current stops is combined with every pair of
    insertion slots for the new pickup (first) and dropoff; the ordering with
    the smallest completion time wins, ties going to the smaller summed
    dropoff time and then to enumeration order.
    """
    router = _as_router(grid)
    if not vehicle.available:
        return PlanDelta(feasible=False)
    pick, drop = new_stops_for(order)
    best_key = None
    best_stops = None
    for base in itertools.permutations(vehicle.stop_plan):
        n = len(base)
        for i in range(n + 1):
            for j in range(i, n + 1):
                stops = list(base[:i]) + [pick] + list(base[i:j]) + [drop] + list(base[j:])
                if not _precedence_ok(stops):
                    continue
                times = plan_times(vehicle.position, stops, router)
                key = _objective(times, stops)
                if best_key is None or key < best_key:
                    best_key = key
                    best_stops = stops
    return evaluate_plan(vehicle, order, now, best_stops, router)


def _precedence_ok(stops: Sequence[Stop]) -> bool:
    # dropoffs of riders already aboard have no pickup in the plan
    pick_at = {s.order_id: i for i, s in enumerate(stops) if s.kind == "pickup"}
    return all(
        not (s.kind == "dropoff" and s.order_id in pick_at and pick_at[s.order_id] > i)
        for i, s in enumerate(stops)
    )


def apply_plan(vehicle: VehicleState, delta: PlanDelta, now: float, grid) -> VehicleState:
    """Commit a feasible insertion: new stop plan, pending pickup, refreshed rider estimates."""
    if not delta.feasible:
        raise ValueError(f"vehicle {vehicle.id}: cannot apply an infeasible plan")
    router = _as_router(grid)
    v = replace(vehicle, stop_plan=tuple(delta.new_stop_plan), pickup_pending=True)
    return _refresh_onboard(v, now, router)


def _refresh_onboard(vehicle: VehicleState, now: float, router: Router) -> VehicleState:
    if not vehicle.onboard:
        return vehicle
    times = plan_times(vehicle.position, vehicle.stop_plan, router)
    drop_at = {s.order_id: t for s, t in zip(vehicle.stop_plan, times) if s.kind == "dropoff"}
    riders = []
    for p in vehicle.onboard:
        rem = drop_at[p.order_id]
        extra = (now - p.picked_up_at) + rem - p.direct_time
        riders.append(replace(p, remaining_time=max(0.0, rem), additional_time=max(p.additional_time, extra, 0.0)))
    return replace(vehicle, onboard=tuple(riders))


@dataclass(frozen=True)
class VehicleEvent:
    kind: str  # "pickup" | "dropoff"
    vehicle_id: int
    order_id: int
    time: float
    wait_time: float = 0.0  # request -> pickup, pickups only
    detour: float = 0.0  # ride time minus direct time, dropoffs only


def advance(vehicle: VehicleState, dt: float, grid, now: float = 0.0) -> Tuple[VehicleState, List[VehicleEvent]]:
    """Drive along the stop plan for ``dt`` minutes starting at clock ``now``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    router = _as_router(grid)
    pos = vehicle.position
    stops = list(vehicle.stop_plan)
    onboard = {p.order_id: p for p in vehicle.onboard}
    pending = vehicle.pickup_pending
    km = vehicle.km_traveled
    left = dt
    clock = now
    events: List[VehicleEvent] = []
    while stops:
        s = stops[0]
        leg = router.travel_time(pos, s.location)
        if leg > left + EPS:
            new_pos = router.move_towards(pos, s.location, left)
            km += router.distance_km(pos, new_pos)
            pos = new_pos
            clock += left
            left = 0.0
            break
        km += router.distance_km(pos, s.location)
        pos = (float(s.location[0]), float(s.location[1]))
        left = max(0.0, left - leg)
        clock += leg
        stops.pop(0)
        if s.kind == "pickup":
            pending = False
            onboard[s.order_id] = PassengerOnBoard(
                order_id=s.order_id,
                dropoff=_dropoff_of(stops, s.order_id),
                remaining_time=0.0,
                additional_time=0.0,
                direct_time=s.direct_time,
                picked_up_at=clock,
                request_time=s.request_time,
            )
            events.append(VehicleEvent("pickup", vehicle.id, s.order_id, clock, wait_time=clock - s.request_time))
        else:
            p = onboard.pop(s.order_id)
            detour = max(0.0, (clock - p.picked_up_at) - p.direct_time)
            events.append(VehicleEvent("dropoff", vehicle.id, s.order_id, clock, detour=detour))
        if left <= 0.0:
            break
    v = replace(
        vehicle,
        position=(float(pos[0]), float(pos[1])),
        stop_plan=tuple(stops),
        onboard=tuple(onboard[k] for k in sorted(onboard, key=lambda oid: _stop_index(stops, oid))),
        pickup_pending=pending,
        km_traveled=km,
    )
    return _refresh_onboard(v, now + dt, router), events


def _dropoff_of(stops: Sequence[Stop], order_id: int):
    for s in stops:
        if s.kind == "dropoff" and s.order_id == order_id:
            return s.location
    raise AssertionError(f"no dropoff stop for order {order_id}")


def _stop_index(stops: Sequence[Stop], order_id: int) -> int:
    for i, s in enumerate(stops):
        if s.order_id == order_id:
            return i
    return len(stops)
