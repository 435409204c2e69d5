"""Unit tests of the local problem layer: costs, residuals, candidates,
and the recursive cost bound."""

import math

import numpy as np
import pytest

from fosmpc.dynamics import AgentParams, AgentState, ControlInput, EquilibriumPair
from fosmpc.environment import Obstacle
from fosmpc.ocp import (CostWeights, FhocpSpec, Horizons, J_HAT_INF, bound_update,
                        braking_plan, candidate_solution, constraint_breakdown,
                        constraint_residual, contingency_cost,
                        min_contingency_horizon, minimal_slacks,
                        nominal_objective, offset_cost, shift_candidate,
                        simulate_contingency, stage_cost_c, tail_violation)
from fosmpc.safeset import Ball, gamma_radius


@pytest.fixture
def params():
    return AgentParams()


@pytest.fixture
def weights():
    return CostWeights()


def make_spec(x0, ball, params, weights, ref=(5.0, 0.0), J_hat=J_HAT_INF,
              neighbors=(), obstacles=(), horizons=None):
    return FhocpSpec(agent_id=0, params=params, x0=x0, active_set=ball,
                     neighbor_sets=list(neighbors), obstacles=list(obstacles),
                     x_ref=AgentState(p=np.asarray(ref, float), v=np.zeros(2)),
                     J_hat=J_hat, horizons=horizons or Horizons(),
                     weights=weights)


def test_min_contingency_horizon(params):
    # 1 + ceil(3.0 / 0.35) = 1 + 9
    assert min_contingency_horizon(params) == 10
    assert min_contingency_horizon(AgentParams(v_max=1.0)) == 1 + 3


def test_stage_and_offset_cost(weights):
    e = np.array([1.0, 2.0, 0.5, -0.5])
    du = np.array([0.3, -0.4])
    expect = 0.1 * (1 + 4 + 0.25 + 0.25) + 0.1 * (0.09 + 0.16)
    assert stage_cost_c(e, du, weights) == pytest.approx(expect, abs=1e-14)
    x_ref = AgentState(p=[1.0, 1.0], v=[0, 0])
    assert offset_cost(np.array([2.0, 1.0, 0.0, 0.0]), x_ref, weights) == \
        pytest.approx(1.0, abs=1e-14)


def test_contingency_cost_matches_naive_sum(params, weights):
    rng = np.random.default_rng(0)
    x0 = AgentState(p=[0.0, 0.0], v=[1.0, 0.5])
    inputs = rng.normal(0, 1, (10, 2))
    plan = simulate_contingency(x0, inputs, params)
    x_ref = AgentState(p=[3.0, 3.0], v=[0, 0])
    naive = sum(stage_cost_c(plan.states[k] - plan.eq.x_bar.as_vec(),
                             plan.inputs[k] - plan.eq.u_bar.u, weights)
                for k in range(10))
    naive += offset_cost(plan.eq.x_bar.as_vec(), x_ref, weights)
    assert contingency_cost(plan, x_ref, weights) == pytest.approx(naive, rel=1e-14)


def test_braking_plan_reaches_rest(params):
    x0 = AgentState(p=[0.0, 0.0], v=[params.v_max, 0.0])
    plan = braking_plan(x0, 10, params)
    assert np.linalg.norm(plan.states[-1, 2:]) <= 1e-12
    # braking magnitudes never exceed the admissible bounds
    assert np.all(np.linalg.norm(plan.inputs, axis=1) <= params.a_max + 1e-12)
    # speed decreases monotonically to zero
    speeds = np.linalg.norm(plan.states[:, 2:], axis=1)
    assert np.all(np.diff(speeds) <= 1e-12)


def test_braking_plan_feasible_in_generated_set(params, weights):
    """Assumption check: the braking plan from any admissible state is a
    feasible backup inside the state-generated safe set."""
    rng = np.random.default_rng(1)
    for _ in range(30):
        v = rng.normal(size=2)
        v = v / max(np.linalg.norm(v), 1e-12) * rng.uniform(0, params.v_max)
        x0 = AgentState(p=rng.normal(0, 3, 2), v=v)
        ball = Ball(x0.p.copy(), gamma_radius(float(np.linalg.norm(v)), params))
        spec = make_spec(x0, ball, params, weights)
        sol = candidate_solution(braking_plan(x0, 10, params), spec)
        assert sol.residual <= 1e-9


def test_shift_candidate_recursion(params, weights):
    """Shifting a feasible backup keeps it feasible for the successor state
    and drops the cost by exactly the realized stage cost."""
    x0 = AgentState(p=[0.0, 0.0], v=[2.0, 1.0])
    ball = Ball(x0.p.copy(), gamma_radius(float(np.linalg.norm(x0.v)), params))
    spec = make_spec(x0, ball, params, weights)
    sol = candidate_solution(braking_plan(x0, 10, params), spec)
    shifted = shift_candidate(sol, params)

    x1 = AgentState.from_vec(sol.contingency.states[1])
    spec1 = make_spec(x1, ball, params, weights)
    sol1 = candidate_solution(shifted, spec1)
    assert sol1.residual <= 1e-9

    ell = stage_cost_c(sol.contingency.states[0] - sol.contingency.eq.x_bar.as_vec(),
                       sol.contingency.inputs[0] - sol.contingency.eq.u_bar.u,
                       weights)
    assert contingency_cost(shifted, spec.x_ref, weights) == \
        pytest.approx(sol.J_c - ell, abs=1e-10)


def test_tail_violation(params):
    x0 = AgentState(p=[0.0, 0.0], v=[0.0, 0.0])
    plan = simulate_contingency(x0, np.zeros((5, 2)), params)
    assert tail_violation(plan.states, params) == 0.0
    # a long constant-velocity coast violates the rest-state tail bound
    fast = np.zeros((6, 4))
    fast[:, 0] = np.linspace(0, 2.0, 6)
    assert tail_violation(fast, params) > 0


def test_constraint_breakdown_flags_each_group(params, weights):
    x0 = AgentState(p=[0.0, 0.0], v=[1.0, 0.0])
    ball = Ball([0.0, 0.0], gamma_radius(1.0, params))
    spec = make_spec(x0, ball, params, weights)
    sol = candidate_solution(braking_plan(x0, 10, params), spec)
    bd = constraint_breakdown(sol, spec)
    assert set(bd) == {"init", "shared_input", "dynamics", "state_bounds",
                       "input_bounds", "obstacles", "terminal_state",
                       "terminal_equilibrium", "terminal_position",
                       "containment", "tail", "lyapunov", "soft_separation"}
    assert constraint_residual(sol, spec) <= 1e-9

    # wrong initial state
    bad = sol.copy()
    bad.nominal.states[0, 0] += 0.5
    assert constraint_breakdown(bad, spec)["init"] >= 0.5
    # broken dynamics chain
    bad = sol.copy()
    bad.contingency.states[3, 1] += 0.2
    assert constraint_breakdown(bad, spec)["dynamics"] >= 0.1
    # obstacle hit
    spec_obs = make_spec(x0, ball, params, weights,
                         obstacles=[Obstacle(center=[0.05, 0.0], radius=0.1)])
    assert constraint_breakdown(sol, spec_obs)["obstacles"] > 0
    # cost bound
    spec_tight = make_spec(x0, ball, params, weights, J_hat=0.0)
    assert constraint_breakdown(sol, spec_tight)["lyapunov"] == \
        pytest.approx(sol.J_c, rel=1e-12)


def test_soft_separation_slacks(params):
    states = np.zeros((4, 4))
    states[:, 0] = [0.0, 0.1, 0.2, 0.3]
    neighbor = Ball([0.5, 0.0], 0.5)
    s = minimal_slacks(states, [neighbor], params)
    assert s.shape == (1, 3)
    d_req = gamma_radius(0.0, params) + 0.5
    # stage 0: distance 0.5 to the neighbor center
    assert s[0, 0] == pytest.approx(max(0.0, d_req ** 2 - 0.25), rel=1e-12)
    assert minimal_slacks(states, [], params).shape == (0, 3)


def test_nominal_objective_terms(params, weights):
    x0 = AgentState(p=[0.0, 0.0], v=[0.0, 0.0])
    ball = Ball([0.0, 0.0], gamma_radius(0.0, params))
    spec = make_spec(x0, ball, params, weights, ref=(1.0, 0.0))
    sol = candidate_solution(braking_plan(x0, 10, params), spec)
    # all-zero plan at the origin, reference at distance 1: N_n+1 position
    # terms plus the weighted offset of the equilibrium
    expect = (spec.horizons.N_n + 1) * 1.0 + weights.gamma * 1.0
    assert nominal_objective(sol.nominal, spec.x_ref, sol.contingency.eq,
                             weights) == pytest.approx(expect, rel=1e-12)
    assert sol.J == pytest.approx(expect, rel=1e-12)


def test_bound_update(weights):
    assert bound_update(J_HAT_INF, np.ones(4), np.ones(2), weights) == J_HAT_INF
    e = np.array([1.0, 0.0, 0.0, 0.0])
    du = np.zeros(2)
    out = bound_update(5.0, e, du, weights)
    assert out == pytest.approx(5.0 - 0.1, abs=1e-14)
    with pytest.raises(ArithmeticError):
        bound_update(0.05, e, du, weights)
    with pytest.raises(ValueError):
        bound_update(-1.0, e, du, weights)


def test_horizon_and_weight_validation():
    with pytest.raises(ValueError):
        Horizons(N_n=0)
    with pytest.raises(ValueError):
        CostWeights(gamma=0.0)
    with pytest.raises(ValueError):
        CostWeights(Q_s=-np.ones(4))
