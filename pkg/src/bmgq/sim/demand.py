"""Trip demand: CSV ingestion and seeded Poisson synthesis."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..core import GridCity, Order
from ..router import GridRouter

CSV_HEADER = ("request_min", "origin_x", "origin_y", "dest_x", "dest_y")


class TripFileError(ValueError):
    pass


def load_trips(path, grid: GridCity, router=None) -> List[Order]:
    """Parse a trip CSV (header ``request_min,origin_x,origin_y,dest_x,dest_y``), sorted by request time."""
    router = router or GridRouter(grid)
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return []
    rows = []
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise TripFileError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise TripFileError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            t = float(row[0])
            ox, oy, dx, dy = (int(c) for c in row[1:])
        except ValueError as exc:
            raise TripFileError(f"{path}:{lineno}: {exc}") from None
        if t < 0:
            raise TripFileError(f"{path}:{lineno}: negative request time {t}")
        for label, p in (("origin", (ox, oy)), ("destination", (dx, dy))):
            if not grid.contains(p):
                raise TripFileError(f"{path}:{lineno}: {label} {p} outside the {grid.width}x{grid.height} grid")
        rows.append((t, lineno, (ox, oy), (dx, dy)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [Order(id=i, origin=o, destination=d, request_time=t, direct_time=router.travel_time(o, d))
            for i, (t, _, o, d) in enumerate(rows)]


def write_trips(path, orders: Sequence[Order]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for o in orders:
            w.writerow([repr(float(o.request_time)), o.origin[0], o.origin[1], o.destination[0], o.destination[1]])


def demand_rates(grid: GridCity, per_minute: float, pattern: str = "uniform",
                 hotspots: Optional[Sequence[Sequence[int]]] = None, hotspot_share: float = 0.7,
                 hotspot_radius: float = 1.5) -> np.ndarray:
    """Zone-pair Poisson intensities (orders / minute), shape (Z, Z) with Z = width * height.

    ``uniform`` spreads demand over all distinct-zone pairs.  ``hotspot``
    puts ``hotspot_share`` of origins and of destinations on zones within
    ``hotspot_radius`` (zone units) of the listed hotspot centres.
    """
    z = grid.n_zones
    xs = np.arange(z) % grid.width
    ys = np.arange(z) // grid.width
    if pattern == "uniform":
        w = np.ones(z)
        wo, wd = w, w
    elif pattern == "hotspot":
        centres = hotspots or [((grid.width - 1) // 2, (grid.height - 1) // 2)]
        near = np.zeros(z, dtype=bool)
        for cx, cy in centres:
            near |= np.hypot(xs - cx, ys - cy) <= hotspot_radius
        w = np.where(near, hotspot_share / near.sum(), (1 - hotspot_share) / max((~near).sum(), 1))
        wo, wd = w, w
    else:
        raise ValueError(f"unknown demand pattern {pattern!r}")
    r = np.outer(wo, wd)
    np.fill_diagonal(r, 0.0)
    total = r.sum()
    return r * (per_minute / total) if total > 0 else r


def synth_demand(rates: np.ndarray, horizon: float, seed, grid: GridCity, router=None) -> List[Order]:
    """Independent Poisson counts per (zone pair, minute); request times are whole minutes."""
    rates = np.asarray(rates, dtype=np.float64)
    if (rates < 0).any():
        raise ValueError("demand rates must be nonnegative")
    router = router or GridRouter(grid)
    rng = np.random.default_rng(seed)
    minutes = int(np.ceil(horizon))
    counts = rng.poisson(rates[None, :, :], size=(minutes,) + rates.shape)
    orders: List[Order] = []
    w = grid.width
    for t, o, d in zip(*np.nonzero(counts)):
        origin = (int(o % w), int(o // w))
        dest = (int(d % w), int(d // w))
        for _ in range(int(counts[t, o, d])):
            orders.append(Order(id=len(orders), origin=origin, destination=dest, request_time=float(t),
                                direct_time=router.travel_time(origin, dest)))
    return orders
