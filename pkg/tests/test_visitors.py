import itertools

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from livingarch.behaviour import PrescriptedBehaviour
from livingarch.sculpture import NodeTopology, Sculpture
from livingarch.visitors import (
    SimplifiedEnv, VisitorPopulation, VisitorScenario, kernel_readings, nearest_target,
    oracle_reward, reachable_configurations, step_simplified,
)


def _raw_with_max(cells, n=24):
    raw = -np.ones(n)
    raw[list(cells)] = 1.0
    return raw


def test_all_equal_leds_keep_visitor_in_place():
    env = SimplifiedEnv(n_visitors=1, start_positions=[3])
    obs, r, _ = env.step(np.zeros(24))
    assert env.positions == [3]
    assert obs[3] == 1.0 and r == 2.0


def test_single_brightest_led_pulls_visitor():
    env = SimplifiedEnv(n_visitors=1, start_positions=[5])
    for k in range(5):
        env.step(_raw_with_max([0]))
        assert env.positions == [4 - k]
    env.step(_raw_with_max([0]))
    assert env.positions == [0]


def test_no_visitors_no_reward():
    env = SimplifiedEnv(n_visitors=0)
    for a in (np.ones(24), -np.ones(24), np.linspace(-1, 1, 24)):
        assert env.step(a)[1] == 0.0


def test_ties_go_to_lower_index():
    assert nearest_target(5, [3, 7]) == 3
    env = SimplifiedEnv(n_visitors=1, start_positions=[5])
    env.step(_raw_with_max([3, 7]))
    assert env.positions == [4]


def test_kernel():
    r = kernel_readings([0, 10], 24)
    assert r[0] == 1.0 and r[1] == 0.5 and r[2] == 0.0 and r[9] == 0.5 and r[10] == 1.0
    assert r.sum() == 3.5


def test_step_validates_width():
    with pytest.raises(ValueError):
        SimplifiedEnv().step(np.zeros(23))


def test_reward_equals_sum_of_emitted_frame():
    env = SimplifiedEnv(random_state=3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        env, frame, r = step_simplified(env, rng.uniform(-1, 1, 24))
        assert r == frame.readings.sum()


@given(st.lists(st.floats(-1, 1), min_size=24, max_size=24), st.integers(0, 10**6))
def test_positions_stay_in_bounds_and_move_one_cell(raw, seed):
    env = SimplifiedEnv(n_visitors=3, random_state=seed)
    before = list(env.positions)
    env.step(np.array(raw))
    for a, b in zip(before, env.positions):
        assert abs(a - b) <= 1 and 0 <= b < 24


def _brute_reachable(starts, k):
    seen = {tuple(sorted(starts))}
    frontier = list(seen)
    while frontier:
        new = []
        for state in frontier:
            for mask in range(1, 2 ** k):
                targets = [i for i in range(k) if mask >> i & 1]
                nxt = tuple(sorted(p + int(np.sign(nearest_target(p, targets) - p)) for p in state))
                if nxt not in seen:
                    seen.add(nxt)
                    new.append(nxt)
        frontier = new
    return seen


@pytest.mark.parametrize("k,starts", [(6, [0, 1]), (7, [2, 3, 4]), (5, [0, 1, 4]), (8, [1, 2]), (6, [0, 0, 5])])
def test_reachability_matches_exhaustive_search(k, starts):
    assert reachable_configurations(starts, k) == _brute_reachable(starts, k)


def test_oracle_examples():
    assert oracle_reward(SimplifiedEnv(start_positions=[0, 1])) == 4.0
    assert oracle_reward(SimplifiedEnv(start_positions=[3, 3])) == 2.0
    assert oracle_reward(SimplifiedEnv(n_visitors=0)) == 0.0
    # too little room to separate two visitors fully
    assert oracle_reward(SimplifiedEnv(n_cells=4, start_positions=[1, 2])) == 3.0
    assert oracle_reward(SimplifiedEnv(n_cells=5, start_positions=[1, 2])) == 3.5
    with pytest.raises(ValueError):
        oracle_reward(SimplifiedEnv(n_cells=25, n_visitors=1))
    with pytest.raises(ValueError):
        oracle_reward(SimplifiedEnv(n_visitors=5))


def test_oracle_bounds_random_policies():
    rng = np.random.default_rng(1)
    for trial in range(20):
        env = SimplifiedEnv(n_cells=10, n_visitors=2, random_state=trial)
        best = oracle_reward(env)
        kind = trial % 3
        for t in range(60):
            if kind == 0:
                raw = rng.uniform(-1, 1, 10)
            elif kind == 1:
                raw = np.where(rng.random(10) < 0.3, 1.0, -1.0)
            else:
                raw = np.round(rng.uniform(-1, 1, 10), 1)
            _, r, _ = env.step(raw)
        assert r <= best + 1e-12


def test_hold_pattern_attains_oracle():
    # a reachable optimum is held by lighting exactly the occupied cells
    env = SimplifiedEnv(start_positions=[0, 1])
    env.step(_raw_with_max([2]))
    assert env.positions == [1, 2]
    env.step(_raw_with_max([0, 3]))
    assert env.positions == [0, 3]
    env.step(_raw_with_max([1, 4]))
    assert env.positions == [1, 4]
    for _ in range(3):
        assert env.step(_raw_with_max(env.positions))[1] == 4.0


def test_reset_draws_distinct_starts():
    env = SimplifiedEnv(random_state=0)
    for _ in range(100):
        env.reset()
        assert len(set(env.positions)) == 2


def test_scenario_is_reproducible_and_sorted(tmp_path):
    a = VisitorScenario.poisson(600, rate_per_min=3, seed=4)
    b = VisitorScenario.poisson(600, rate_per_min=3, seed=4)
    assert a == b
    times = [x.time for x in a.arrivals]
    assert times == sorted(times)
    path = tmp_path / "s.yaml"
    a.to_yaml(path)
    assert VisitorScenario.from_yaml(path) == a
    path.write_text(yaml.safe_dump({"seed": 1, "arrivals": [], "crowd": 3}))
    with pytest.raises(ValueError):
        VisitorScenario.from_yaml(path)


def test_population_spawn_and_depart():
    scen = VisitorScenario(arrivals=[{"time": 1.0, "dwell": 2.0}, {"time": 0.5, "dwell": 0.0}], seed=2)
    pop = VisitorPopulation(scen, NodeTopology.grid())
    arrived, gone = pop.spawn_visitors(0.0)
    assert not arrived
    arrived, _ = pop.spawn_visitors(0.5)
    assert len(arrived) == 1
    arrived, gone = pop.spawn_visitors(1.0)
    assert len(arrived) == 1 and len(gone) == 1
    _, gone = pop.spawn_visitors(3.0)
    assert len(gone) == 1 and not pop.visitors


def test_brightest_led_seeker_walks_to_light():
    scen = VisitorScenario(arrivals=[{"time": 0.0, "dwell": 100.0, "behaviour": "brightest_led_seeker"}], seed=0)
    topo = NodeTopology.grid()
    pop = VisitorPopulation(scen, topo, speed=1.0)
    pop.spawn_visitors(0.0)
    led = np.zeros(24)
    led[17] = 1.0
    for _ in range(200):
        pop.move(0.1, led)
    assert np.linalg.norm(pop.visitors[0].position - topo.positions[17]) < 1e-9
