import pytest

from bmgq.core import Order
from bmgq.router import travel_time
from bmgq.sim import SimConfig, write_trips

# 0.8 km zones at 48 km/h: exactly one minute per zone
FAST = dict(zone_edge_km=0.8, speed_kmph=48.0)

# Hand-traced 3-order fixture (10 minutes, 5 vehicles, greedy dispatch):
#   order 0 at t=0, (0,1)->(0,4): vehicle 0 at (0,0); pickup 1 min, 2.4 km -> 100 + 96 - 5 - 1 = 190
#   order 1 at t=0, (5,6)->(9,6): vehicle 4 at (5,5); pickup 1 min, 3.2 km -> 100 + 128 - 5 - 1 = 222
#   order 2 at t=2, (9,8)->(5,8): vehicle 1 at (9,9); pickup 1 min, 3.2 km -> 222
#   the remaining 47 vehicle-minutes cost 1 each: total 634 - 47 = 587
#   every wait is 1 min, no detours; km: v0 4 zones, v4 5, v1 5 -> (3.2 + 4 + 4) / 5 = 2.24
SCRIPTED_POSITIONS = ((0, 0), (9, 9), (0, 9), (9, 0), (5, 5))
SCRIPTED_TRIPS = ((0.0, (0, 1), (0, 4)), (0.0, (5, 6), (9, 6)), (2.0, (9, 8), (5, 8)))
SCRIPTED_EXPECTED = dict(cumulative_total_reward=587.0, service_rate=1.0, avg_waiting_min=1.0, avg_detour_min=0.0,
                         vehicle_km_traveled=2.24, orders_served=3)


def scripted_config(**kw):
    base = dict(n_vehicles=5, horizon=10.0, initial_positions=SCRIPTED_POSITIONS, **FAST)
    base.update(kw)
    return SimConfig(**base)


def scripted_orders(cfg):
    return [Order(i, o, d, t, travel_time(o, d, cfg.grid)) for i, (t, o, d) in enumerate(SCRIPTED_TRIPS)]


@pytest.fixture
def scripted(tmp_path):
    """(SimConfig reading the trips from CSV, orders, expected metrics)."""
    cfg = scripted_config()
    orders = scripted_orders(cfg)
    path = tmp_path / "trips.csv"
    write_trips(path, orders)
    from dataclasses import replace

    return replace(cfg, trips_csv=str(path)), orders, SCRIPTED_EXPECTED


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
