"""Domain types, the 14-value state encoding and the per-vehicle reward."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

STATE_DIM = 14
NULL_CANDIDATE = -1.0
# remaining / additional / wait times are normalised by this cap and clipped
TIME_CAP_MIN = 30.0

Coord = Tuple[float, float]

STATE_FIELDS = (
    "veh_x_norm",
    "veh_y_norm",
    "vacant_frac",
    "t_norm",
    "cand_origin_x_norm",
    "cand_origin_y_norm",
    "cand_dest_x_norm",
    "cand_dest_y_norm",
    "cand_wait_norm",
    "occ_min_remaining_norm",
    "occ_max_remaining_norm",
    "occ_sum_additional_norm",
    "occupancy_frac",
    "pickup_pending_flag",
)


@dataclass(frozen=True)
class GridCity:
    width: int
    height: int
    zone_edge_km: float = 0.8
    speed_kmph: float = 16.8

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must have at least one zone, got {self.width}x{self.height}")
        if not self.zone_edge_km > 0:
            raise ValueError("zone_edge_km must be positive")
        if not self.speed_kmph > 0:
            raise ValueError("speed_kmph must be positive")

    @property
    def n_zones(self) -> int:
        return self.width * self.height

    def contains(self, p: Sequence[float]) -> bool:
        x, y = p
        return 0 <= x <= self.width - 1 and 0 <= y <= self.height - 1

    def minutes_per_zone(self) -> float:
        return self.zone_edge_km / self.speed_kmph * 60.0

    def zone_of(self, p: Sequence[float]) -> Tuple[int, int]:
        x, y = p
        zx = min(max(int(math.floor(x + 0.5)), 0), self.width - 1)
        zy = min(max(int(math.floor(y + 0.5)), 0), self.height - 1)
        return zx, zy


class OrderStatus(str, Enum):
    OPEN = "open"
    ASSIGNED = "assigned"
    ONBOARD = "onboard"
    COMPLETED = "completed"
    EXPIRED = "expired"


_ALLOWED_TRANSITIONS = {
    OrderStatus.OPEN: {OrderStatus.ASSIGNED, OrderStatus.EXPIRED},
    OrderStatus.ASSIGNED: {OrderStatus.ONBOARD},
    OrderStatus.ONBOARD: {OrderStatus.COMPLETED},
    OrderStatus.COMPLETED: set(),
    OrderStatus.EXPIRED: set(),
}


@dataclass(frozen=True)
class Order:
    id: int
    origin: Tuple[int, int]
    destination: Tuple[int, int]
    request_time: float
    direct_time: float
    status: OrderStatus = OrderStatus.OPEN

    def __post_init__(self):
        if self.direct_time < 0:
            raise ValueError(f"order {self.id}: negative direct_time {self.direct_time}")

    def with_status(self, status: OrderStatus) -> "Order":
        if status not in _ALLOWED_TRANSITIONS[self.status]:
            raise ValueError(f"order {self.id}: illegal transition {self.status.value} -> {status.value}")
        return replace(self, status=status)

    def age(self, now: float) -> float:
        return now - self.request_time


@dataclass(frozen=True)
class PassengerOnBoard:
    order_id: int
    dropoff: Tuple[int, int]
    remaining_time: float
    additional_time: float = 0.0
    direct_time: float = 0.0
    picked_up_at: float = 0.0
    request_time: float = 0.0


@dataclass(frozen=True)
class Stop:
    kind: str  # "pickup" | "dropoff"
    order_id: int
    location: Tuple[int, int]
    request_time: float = 0.0
    direct_time: float = 0.0


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: Coord
    capacity: int = 3
    onboard: Tuple[PassengerOnBoard, ...] = ()
    stop_plan: Tuple[Stop, ...] = ()
    pickup_pending: bool = False
    km_traveled: float = 0.0

    def __post_init__(self):
        if len(self.onboard) + int(self.pickup_pending) > self.capacity:
            raise ValueError(f"vehicle {self.id}: over capacity")

    @property
    def vacant_seats(self) -> int:
        return self.capacity - len(self.onboard) - (1 if self.pickup_pending else 0)

    @property
    def available(self) -> bool:
        """Can be offered a new order this epoch."""
        return self.vacant_seats >= 1 and not self.pickup_pending

    def check_invariants(self) -> None:
        drops = [s.order_id for s in self.stop_plan if s.kind == "dropoff"]
        for p in self.onboard:
            if drops.count(p.order_id) != 1:
                raise AssertionError(f"vehicle {self.id}: passenger {p.order_id} lacks a unique dropoff stop")
        for i, s in enumerate(self.stop_plan):
            if s.kind == "pickup":
                later = [t for t in self.stop_plan[i + 1:] if t.kind == "dropoff" and t.order_id == s.order_id]
                if len(later) != 1:
                    raise AssertionError(f"vehicle {self.id}: pickup {s.order_id} without a following dropoff")
        if not 0 <= self.vacant_seats <= self.capacity:
            raise AssertionError(f"vehicle {self.id}: vacant seats {self.vacant_seats} out of range")


@dataclass(frozen=True)
class RewardParams:
    beta0: float = 100.0
    beta1: float = 40.0
    beta2: float = 5.0
    beta3: float = 2.0
    beta4: float = 20.0
    thre: float = 15.0
    c0: float = 1.0

    def __post_init__(self):
        for name in ("beta0", "beta1", "beta2", "beta3", "beta4", "c0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.thre > 0:
            raise ValueError("thre must be positive")


def _clip01(v: float) -> float:
    return min(max(v, 0.0), 1.0)


def encode_state(
    vehicle: VehicleState,
    candidate: Optional[Order],
    now: float,
    grid: GridCity,
    horizon: float,
) -> np.ndarray:
    """Encode one (vehicle, candidate order) pair into the fixed 14-value layout.

    Coordinates are divided by the largest zone index on each axis, times by
    ``horizon`` (clock) or ``TIME_CAP_MIN`` (remaining/additional/wait).
    The five ``cand_*`` entries are ``NULL_CANDIDATE`` when no order is offered.
    """
    sx = float(max(grid.width - 1, 1))
    sy = float(max(grid.height - 1, 1))
    cap = float(vehicle.capacity)
    out = np.empty(STATE_DIM, dtype=np.float64)
    out[0] = vehicle.position[0] / sx
    out[1] = vehicle.position[1] / sy
    out[2] = vehicle.vacant_seats / cap
    out[3] = _clip01(now / horizon) if horizon > 0 else 0.0
    if candidate is None:
        out[4:9] = NULL_CANDIDATE
    else:
        out[4] = candidate.origin[0] / sx
        out[5] = candidate.origin[1] / sy
        out[6] = candidate.destination[0] / sx
        out[7] = candidate.destination[1] / sy
        out[8] = _clip01((now - candidate.request_time) / TIME_CAP_MIN)
    if vehicle.onboard:
        rem = [p.remaining_time for p in vehicle.onboard]
        out[9] = _clip01(min(rem) / TIME_CAP_MIN)
        out[10] = _clip01(max(rem) / TIME_CAP_MIN)
        out[11] = _clip01(sum(p.additional_time for p in vehicle.onboard) / TIME_CAP_MIN)
    else:
        out[9:12] = 0.0
    out[12] = len(vehicle.onboard) / cap
    out[13] = 1.0 if vehicle.pickup_pending else 0.0
    return out


def reward(decision: str, dis_km: float, pickup_min: float, add_min: float, params: RewardParams) -> float:
    """Per-vehicle reward for one decision epoch.

    ``decision`` is ``"reject"`` (also used for unavailable vehicles) or ``"accept"``.
    """
    if dis_km < 0 or pickup_min < 0 or add_min < 0:
        raise ValueError(f"reward inputs must be nonnegative (dis={dis_km}, pickup={pickup_min}, add={add_min})")
    if decision == "reject":
        return -params.c0
    if decision != "accept":
        raise ValueError(f"unknown decision {decision!r}")
    p = params
    return (
        p.beta0
        + p.beta1 * dis_km
        - p.beta2 * pickup_min
        - p.beta3 * min(add_min, p.thre)
        - p.beta4 * max(add_min - p.thre, 0.0)
        - p.c0
    )


def platform_reward(per_agent_rewards: Sequence[float]) -> float:
    return math.fsum(per_agent_rewards)
