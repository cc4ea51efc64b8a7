import math

import numpy as np
import pytest

from bmgq.core import Order, OrderStatus
from bmgq.dispatch import Assignment, ConstraintViolation, ScoreMatrix, solve_assignment
from bmgq.policies import GreedyPolicy
from bmgq.router import travel_time
from bmgq.sim import (EpisodeTrace, SimConfig, Simulator, TripFileError, build_orders, demand_rates,
                      discounted_returns, load_trips, measure_overestimation, run_episode, synth_demand, write_trips)
from bmgq.sim.demand import CSV_HEADER

from conftest import FAST, scripted_config, scripted_orders

GRID = SimConfig().grid


def test_load_empty_and_header_only(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    assert load_trips(p, GRID) == []
    p.write_text(",".join(CSV_HEADER) + "\n")
    assert load_trips(p, GRID) == []


def test_load_one_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text(",".join(CSV_HEADER) + "\n3.5,0,0,3,4\n")
    (o,) = load_trips(p, GRID)
    assert o.origin == (0, 0) and o.destination == (3, 4) and o.request_time == 3.5
    assert o.direct_time == pytest.approx(7 * 0.8 / 16.8 * 60)


def test_load_sorts_rows(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text(",".join(CSV_HEADER) + "\n5,0,0,1,1\n1,2,2,3,3\n")
    orders = load_trips(p, GRID)
    assert [o.request_time for o in orders] == [1.0, 5.0] and [o.id for o in orders] == [0, 1]


@pytest.mark.parametrize("row, msg", [("1,0,0,10,4", "line 3"), ("1,0,0,3", "line 3"), ("x,0,0,1,1", "line 3"),
                                      ("-1,0,0,1,1", "line 3")])
def test_load_errors_name_line(tmp_path, row, msg):
    p = tmp_path / "t.csv"
    p.write_text(",".join(CSV_HEADER) + "\n0,1,1,2,2\n" + row + "\n")
    with pytest.raises(TripFileError, match=r":3:"):
        load_trips(p, GRID)


def test_write_load_round_trip(tmp_path):
    rates = demand_rates(GRID, 2.0)
    orders = synth_demand(rates, 10, 3, GRID)
    write_trips(tmp_path / "o.csv", orders)
    back = load_trips(tmp_path / "o.csv", GRID)
    assert [(o.origin, o.destination, o.request_time) for o in back] == \
        [(o.origin, o.destination, o.request_time) for o in sorted(orders, key=lambda o: (o.request_time, o.id))]


def test_synth_zero_rates():
    assert synth_demand(np.zeros((GRID.n_zones, GRID.n_zones)), 30, 0, GRID) == []


def test_synth_poisson_mean():
    rates = np.zeros((GRID.n_zones, GRID.n_zones))
    rates[3, 47] = 2.0
    counts = [len(synth_demand(rates, 30, s, GRID)) for s in range(100)]
    # mean of 100 Poisson(60) draws: sd of the mean is sqrt(60 / 100)
    assert abs(np.mean(counts) - 60) < 3 * math.sqrt(60 / 100)


def test_synth_deterministic():
    rates = demand_rates(GRID, 3.0, "hotspot")
    a, b = synth_demand(rates, 30, 11, GRID), synth_demand(rates, 30, 11, GRID)
    assert a == b and len(a) > 0
    assert rates.sum() == pytest.approx(3.0) and (np.diag(rates) == 0).all()
    with pytest.raises(ValueError):
        synth_demand(-rates, 30, 1, GRID)


def test_zero_demand_episode():
    cfg = SimConfig(n_vehicles=6, demand_per_min=0.0)
    m, exps = run_episode(cfg, GreedyPolicy(), seed=1)
    assert m.service_rate == 1.0 and m.total_requests == 0
    assert m.cumulative_total_reward == -cfg.reward.c0 * cfg.n_vehicles * cfg.n_steps
    assert all(e.reward == -1.0 and e.action == 0 for e in exps)


def test_scripted_trace_matches_hand_values():
    cfg = scripted_config()
    m, exps = run_episode(cfg, GreedyPolicy(), seed=0, orders=scripted_orders(cfg))
    assert m.cumulative_total_reward == 587.0
    assert m.service_rate == 1.0 and m.orders_served == 3
    assert m.avg_waiting_min == 1.0 and m.avg_detour_min == 0.0
    assert m.vehicle_km_traveled == pytest.approx(2.24, abs=1e-12)
    accepts = sorted((e.time, e.vehicle_id, e.reward) for e in exps if e.action == 1)
    assert accepts == [(0.0, 0, 190.0), (0.0, 4, 222.0), (2.0, 1, 222.0)]


def test_single_match_experience():
    cfg = SimConfig(n_vehicles=1, horizon=3.0, initial_positions=((2, 2),), **FAST)
    order = Order(0, (2, 3), (6, 3), 0.0, travel_time((2, 3), (6, 3), cfg.grid))
    sim = Simulator(cfg, [order], seed=0)
    obs = sim.observe()
    assert obs.feasible.tolist() == [[True]]
    res = sim.step(Assignment({0: 0}), ScoreMatrix(obs.vehicle_ids, obs.order_ids, [[1.0]], obs.feasible, [0.0]))
    (e,) = res.experiences
    # 3.2 km trip, 1 min pickup, no pooling delay: 100 + 128 - 5 - 0 - 1
    assert e.action == 1 and e.reward == 222.0
    assert e.state[4] != -1 and e.next_state[4] == -1 and not e.terminal
    assert res.platform_reward == 222.0


def test_expiry_after_window():
    cfg = SimConfig(n_vehicles=1, horizon=10.0, initial_positions=((9, 9),))
    order = Order(0, (0, 0), (1, 0), 0.0, travel_time((0, 0), (1, 0), cfg.grid))
    sim = Simulator(cfg, [order], seed=0)
    seen = []
    while not sim.done:
        obs = sim.observe()
        seen.append((sim.now, list(obs.order_ids)))
        sim.step(Assignment({v: None for v in obs.vehicle_ids}))
    assert dict(seen)[5.0] == [0]
    assert dict(seen)[6.0] == []
    assert sim.orders[0].status is OrderStatus.EXPIRED
    assert sim.metrics().orders_expired == 1


def test_step_rejects_invalid_assignments():
    cfg = SimConfig(n_vehicles=2, horizon=3.0, initial_positions=((0, 0), (9, 9)))
    orders = [Order(0, (0, 1), (3, 1), 0.0, 1.0), Order(1, (9, 8), (5, 8), 0.0, 1.0)]
    sim = Simulator(cfg, orders, seed=0)
    with pytest.raises(ConstraintViolation):
        sim.step(Assignment({0: 1}))  # order 1 is far outside vehicle 0's radius
    with pytest.raises(ConstraintViolation):
        sim.step(Assignment({0: 0, 1: 0}))


def test_toy_episode_invariants():
    cfg = SimConfig()
    m, exps = run_episode(cfg, GreedyPolicy(), seed=4)
    assert m.constraint_checks == cfg.n_steps
    assert m.orders_served + m.orders_expired + m.orders_open_at_end == m.total_requests
    assert 0 <= m.service_rate <= 1 and m.avg_waiting_min >= 0 and m.avg_detour_min >= 0
    assert 0 < len(exps) < cfg.n_vehicles * cfg.n_steps
    assert all(e.terminal == (e.time == cfg.horizon - cfg.dt) for e in exps)


def test_experiences_only_for_decisions():
    # vehicle 1 sits out of range of the only order and faces no decision
    cfg = SimConfig(n_vehicles=2, horizon=3.0, initial_positions=((2, 2), (9, 9)), **FAST)
    order = Order(0, (2, 3), (6, 3), 0.0, travel_time((2, 3), (6, 3), cfg.grid))
    sim = Simulator(cfg, [order], seed=0)
    obs = sim.observe()
    assert obs.feasible.tolist() == [[True], [False]]
    res = sim.step(Assignment({0: None, 1: None}))
    assert [e.vehicle_id for e in res.experiences] == [0]
    assert res.experiences[0].action == 0 and res.experiences[0].reward == -1.0
    assert res.rewards.tolist() == [-1.0, -1.0]
    res = sim.step(Assignment({0: 0, 1: None}))
    assert [(e.vehicle_id, e.action) for e in res.experiences] == [(0, 1)]
    assert sim.step(Assignment({0: None, 1: None})).experiences == []


def test_waits_match_assignment_estimates():
    """Realised waits equal the router estimate at assignment; solo pickups stay within expiry + one leg."""
    cfg = SimConfig(demand_per_min=6.0)
    max_leg = cfg.r_match_km * math.sqrt(2) / cfg.speed_kmph * 60
    sim = Simulator(cfg, build_orders(cfg, 9, 0), seed=9, record_experiences=False)
    pol = GreedyPolicy()
    est, solo = {}, set()
    while not sim.done:
        obs = sim.observe()
        sm, _ = pol.scores(obs)
        a = solve_assignment(sm)
        for v, o in a.matched().items():
            est[o] = obs.delta(v, o).pickup_time
            if not obs.fleet[sim.index[v]].stop_plan:
                solo.add(o)
        sim.step(a, sm)
    assert sim.wait_by_order
    for o, w in sim.wait_by_order.items():
        assert w == pytest.approx(est[o], abs=1e-9)
        if o in solo:
            assert w <= cfg.expiry_min + max_leg + 1e-9


def test_cumulative_equals_step_sums():
    cfg = SimConfig(n_vehicles=20)
    sim = Simulator(cfg, build_orders(cfg, 2, 0), seed=2)
    pol = GreedyPolicy()
    while not sim.done:
        sm, _ = pol.scores(sim.observe())
        res = sim.step(solve_assignment(sm), sm)
        assert res.platform_reward == math.fsum(res.rewards)
    assert sim.metrics().cumulative_total_reward == math.fsum(sim.platform_rewards)


def test_episode_deterministic():
    a = run_episode(SimConfig(), GreedyPolicy(), seed=3, episode=2)[0]
    b = run_episode(SimConfig(), GreedyPolicy(), seed=3, episode=2)[0]
    assert a == b


def test_demand_identical_across_feature_specs():
    cfg = SimConfig()
    assert build_orders(cfg, 5, 7) == build_orders(cfg, 5, 7)
    assert build_orders(cfg, 5, 7) != build_orders(cfg, 5, 8)


def test_overestimation_cases():
    rewards = np.array([[1.0, 2.0], [3.0, 0.0], [0.5, 1.0]])
    g = discounted_returns(rewards, 0.9)
    perfect = [(t, i, g[t, i]) for t in range(3) for i in range(2)]
    assert measure_overestimation(EpisodeTrace(rewards, perfect, 0.9)) == pytest.approx(0.0, abs=1e-12)
    const = np.array([[4.0], [0.0], [0.0]])
    assert measure_overestimation(EpisodeTrace(const, [(0, 0, 10.0)], 0.5)) == 6.0
    zero = [(t, i, 7.0) for t in range(3) for i in range(2)]
    assert measure_overestimation(EpisodeTrace(rewards, zero, 0.0)) == pytest.approx(np.mean(7.0 - rewards))
    with pytest.raises(ValueError):
        measure_overestimation(EpisodeTrace(rewards, [], 0.9))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0)
    with pytest.raises(ValueError):
        SimConfig(horizon=10.5)
    with pytest.raises(ValueError):
        SimConfig(expiry_min=0)
    with pytest.raises(ValueError):
        SimConfig(n_vehicles=2, initial_positions=((0, 0),))
