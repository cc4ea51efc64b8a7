"""Posterior scores, exact vehicle-order assignment, and the greedy baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

S_EXPLORE = 100_000.0


@dataclass(frozen=True)
class ConstantBias:
    c: float = 0.0


BiasMode = Union[str, ConstantBias]  # "reject_q" or ConstantBias(c)


def score(q_accept: float, q_reject: float, epsilon: float, rng: np.random.Generator,
          s_explore: float = S_EXPLORE, bias_mode: BiasMode = "reject_q") -> float:
    """Exploration-aware assignment score of one (vehicle, order) pair."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return s_explore
    if isinstance(bias_mode, ConstantBias):
        return q_accept - bias_mode.c
    if bias_mode != "reject_q":
        raise ValueError(f"unknown bias mode {bias_mode!r}")
    return q_accept - q_reject


@dataclass
class ScoreMatrix:
    """Scores for ``vehicle_ids`` x ``order_ids``; ``no_order`` holds each vehicle's stay-unmatched score."""

    vehicle_ids: List[int]
    order_ids: List[int]
    scores: np.ndarray  # (V, O); entries off the feasibility mask are ignored
    feasible: np.ndarray  # (V, O) bool
    no_order: np.ndarray  # (V,)

    def __post_init__(self):
        v, o = len(self.vehicle_ids), len(self.order_ids)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(v, o)
        self.feasible = np.asarray(self.feasible, dtype=bool).reshape(v, o)
        self.no_order = np.asarray(self.no_order, dtype=np.float64).reshape(v)

    @classmethod
    def empty(cls, vehicle_ids=(), order_ids=()) -> "ScoreMatrix":
        v, o = len(vehicle_ids), len(order_ids)
        return cls(list(vehicle_ids), list(order_ids), np.zeros((v, o)), np.zeros((v, o), bool), np.zeros(v))

    def gains(self) -> np.ndarray:
        """Gain of each feasible pair over leaving the vehicle unmatched; -inf where infeasible."""
        g = self.scores - self.no_order[:, None]
        return np.where(self.feasible, g, -np.inf)

    def objective(self, assignment: "Assignment") -> float:
        row = {v: i for i, v in enumerate(self.vehicle_ids)}
        col = {o: j for j, o in enumerate(self.order_ids)}
        total = []
        for v in self.vehicle_ids:
            o = assignment.pairs.get(v)
            i = row[v]
            total.append(self.no_order[i] if o is None else self.scores[i, col[o]])
        return math.fsum(total)


@dataclass
class Assignment:
    pairs: Dict[int, Optional[int]] = field(default_factory=dict)

    def matched(self) -> Dict[int, int]:
        return {v: o for v, o in self.pairs.items() if o is not None}

    def order_of(self, vehicle_id: int) -> Optional[int]:
        return self.pairs.get(vehicle_id)


class ConstraintViolation(AssertionError):
    pass


def check_assignment(assignment: Assignment, scores: ScoreMatrix) -> None:
    """Raise ``ConstraintViolation`` unless every matched pair is feasible and both sides are used at most once."""
    row = {v: i for i, v in enumerate(scores.vehicle_ids)}
    col = {o: j for j, o in enumerate(scores.order_ids)}
    seen = set()
    for v, o in assignment.pairs.items():
        if v not in row:
            raise ConstraintViolation(f"vehicle {v} was not eligible this epoch")
        if o is None:
            continue
        if o in seen:
            raise ConstraintViolation(f"order {o} assigned to more than one vehicle")
        seen.add(o)
        if o not in col or not scores.feasible[row[v], col[o]]:
            raise ConstraintViolation(f"pair ({v}, {o}) is outside the matching radius")


def solve_assignment(scores: ScoreMatrix) -> Assignment:
    """Maximise the summed score; each vehicle takes at most one order and vice versa.

    Only pairs with a strictly positive gain can improve on leaving the
    vehicle unmatched, so the problem reduces to a rectangular linear
    assignment over clipped gains.
    """
    pairs = {v: None for v in scores.vehicle_ids}
    if not scores.vehicle_ids or not scores.order_ids:
        return Assignment(pairs)
    gain = scores.gains()
    w = np.where(np.isfinite(gain) & (gain > 0), gain, 0.0)
    if not (w > 0).any():
        return Assignment(pairs)
    rows, cols = linear_sum_assignment(w, maximize=True)
    for i, j in zip(rows, cols):
        if w[i, j] > 0:
            pairs[scores.vehicle_ids[i]] = scores.order_ids[j]
    return Assignment(pairs)


BRUTE_FORCE_LIMIT = 10


def brute_force_assignment(scores: ScoreMatrix) -> Assignment:
    """Enumerate every injective partial matching over feasible pairs (test oracle)."""
    nv, no = len(scores.vehicle_ids), len(scores.order_ids)
    if nv > BRUTE_FORCE_LIMIT or no > BRUTE_FORCE_LIMIT:
        raise ValueError(f"instance {nv}x{no} too large for brute force (limit {BRUTE_FORCE_LIMIT})")
    options = [[j for j in range(no) if scores.feasible[i, j]] for i in range(nv)]
    best_val, best = -math.inf, None
    combo: list = [None] * nv
    used = [False] * no

    # depth-first over vehicles; every injective partial matching is visited once
    def walk(i: int) -> None:
        nonlocal best_val, best
        if i == nv:
            val = math.fsum(scores.no_order[r] if c is None else scores.scores[r, c] for r, c in enumerate(combo))
            if val > best_val:
                best_val, best = val, tuple(combo)
            return
        combo[i] = None
        walk(i + 1)
        for j in options[i]:
            if not used[j]:
                used[j] = True
                combo[i] = j
                walk(i + 1)
                used[j] = False
        combo[i] = None

    walk(0)
    if best is None:
        return Assignment({})
    return Assignment({scores.vehicle_ids[i]: (None if j is None else scores.order_ids[j]) for i, j in enumerate(best)})


def greedy_dispatch(vehicle_ids: Sequence[int], order_ids: Sequence[int], feasible: np.ndarray,
                    reward_fn: Callable[[int, int], float], reject_reward: float) -> Tuple[Assignment, ScoreMatrix]:
    """Assignment maximising the summed immediate rewards.

    ``reward_fn(vehicle_id, order_id)`` is only called on feasible pairs.
    """
    nv, no = len(vehicle_ids), len(order_ids)
    s = np.zeros((nv, no))
    for i, v in enumerate(vehicle_ids):
        for j, o in enumerate(order_ids):
            if feasible[i, j]:
                s[i, j] = reward_fn(v, o)
    sm = ScoreMatrix(list(vehicle_ids), list(order_ids), s, feasible, np.full(nv, reject_reward))
    return solve_assignment(sm), sm
