"""Unit tests of the closed-loop coordinator and the brute-force oracle."""

import math

import numpy as np
import pytest

from fosmpc.dynamics import AgentParams, AgentState
from fosmpc.environment import CLEARANCE_SENTINEL, Obstacle, obstacle_clearance
from fosmpc.ocp import CostWeights, FhocpSpec, Horizons, J_HAT_INF
from fosmpc.safeset import Ball
from fosmpc.scenario import AgentConfig, ScenarioConfig
from fosmpc.sim import (check_collision_free, closed_loop_step, init_world,
                        oracle_bruteforce, run_scenario)


@pytest.fixture
def params():
    return AgentParams()


def test_obstacle_clearance(params):
    assert obstacle_clearance([0, 0], 0.2, []) == CLEARANCE_SENTINEL
    obs = [Obstacle(center=[1.0, 0.0], radius=0.5)]
    assert obstacle_clearance([0.0, 0.0], 0.3, obs) == pytest.approx(0.2)
    assert obstacle_clearance([0.3, 0.0], 0.2, obs) == pytest.approx(0.0)
    assert obstacle_clearance([0.9, 0.0], 0.2, obs) < 0


def test_check_collision_free():
    a = AgentState(p=[0.0, 0.0], v=[0, 0])
    ok, d = check_collision_free([a], [0.2])
    assert ok and d == math.inf
    b = AgentState(p=[0.4, 0.0], v=[0, 0])
    ok, d = check_collision_free([a, b], [0.2, 0.2])
    assert ok and d == pytest.approx(0.0)  # touching is allowed
    c = AgentState(p=[0.0, 0.0], v=[0, 0])
    ok, _ = check_collision_free([a, c], [0.2, 0.2])
    assert not ok


def test_empty_scenario():
    cfg = ScenarioConfig(agents=[])
    metrics, records = run_scenario(cfg)
    assert metrics.steps == 0 and records == []


def test_single_agent_at_reference_stays(params):
    """Equilibrium fixed point: an agent starting at its reference barely
    moves and never freezes."""
    cfg = ScenarioConfig(agents=[AgentConfig(0, p0=[1.0, 1.0], v0=[0, 0],
                                             p_ref=[1.0, 1.0])],
                         max_steps=5)
    world = init_world(cfg)
    for _ in range(3):
        rec = closed_loop_step(world, cfg, strict=True)
        assert not rec.per_agent[0].frozen_next
        assert rec.events == []
    assert np.linalg.norm(world.agents[0].state.p - [1.0, 1.0]) <= 1e-3
    assert np.linalg.norm(world.agents[0].state.v) <= 1e-2


def test_two_distant_agents_shift(params):
    cfg = ScenarioConfig(agents=[
        AgentConfig(0, p0=[0.0, 0.0], v0=[0, 0], p_ref=[1.0, 0.0]),
        AgentConfig(1, p0=[30.0, 0.0], v0=[0, 0], p_ref=[29.0, 0.0])],
        max_steps=5)
    world = init_world(cfg)
    for _ in range(3):
        rec = closed_loop_step(world, cfg, strict=True)
        assert rec.freeze_count == 0


def test_head_on_freeze_without_overlap(params):
    """Two approaching agents: someone freezes eventually, sets never overlap."""
    cfg = ScenarioConfig(agents=[
        AgentConfig(0, p0=[0.0, 0.0], v0=[0, 0], p_ref=[9.0, 0.0]),
        AgentConfig(1, p0=[9.0, 0.0], v0=[0, 0], p_ref=[0.0, 0.0])],
        max_steps=120)
    metrics, _ = run_scenario(cfg, strict=True)
    assert metrics.freeze_steps >= 1
    assert metrics.min_set_gap >= -1e-9
    assert metrics.collision_free


def test_run_scenario_invariants_density(params):
    from fosmpc.scenario import random_scenario
    cfg = random_scenario(3, seed=5, max_steps=120)
    metrics, records = run_scenario(cfg, strict=True)
    assert metrics.collision_free
    assert metrics.min_set_gap >= -1e-9
    assert metrics.max_candidate_residual <= 1e-8
    assert metrics.max_lyap_violation <= 1e-6
    assert metrics.max_shifted_cost_error <= 1e-8
    for i in metrics.Jc_series:
        nj = metrics.normalized_Jc(i)
        assert np.all(np.diff(nj) <= 1e-9)


def make_1d_spec(params, p0=0.0, v0=0.0, c=0.0, R=1.0, ref=0.0, N_c=3):
    return FhocpSpec(agent_id=0, params=params,
                     x0=AgentState(p=[p0, 0.0], v=[v0, 0.0]),
                     active_set=Ball([c, 0.0], R),
                     neighbor_sets=[], obstacles=[],
                     x_ref=AgentState(p=[ref, 0.0], v=[0.0, 0.0]),
                     J_hat=J_HAT_INF, horizons=Horizons(N_n=N_c, N_c=N_c),
                     weights=CostWeights())


def test_oracle_rest_in_generous_ball(params):
    spec = make_1d_spec(params, R=2.0, ref=1.0)
    res = oracle_bruteforce(spec)
    assert res.feasible
    assert np.allclose(res.best_inputs, 0.0)
    # offset term only: P_s position error of 1 m
    assert res.best_cost == pytest.approx(1.0, rel=1e-9)


def test_oracle_infeasible_tight_ball(params):
    # ball far smaller than the stopping distance at speed
    spec = make_1d_spec(params, v0=3.0 * params.Ts * params.a_max, R=0.25)
    res = oracle_bruteforce(spec)
    assert not res.feasible


def test_oracle_refuses_large_grid(params):
    spec = make_1d_spec(params, N_c=13)
    with pytest.raises(ValueError):
        oracle_bruteforce(spec)


def test_oracle_requires_1d(params):
    spec = make_1d_spec(params)
    spec.x0.v[1] = 0.1
    with pytest.raises(ValueError):
        oracle_bruteforce(spec)
