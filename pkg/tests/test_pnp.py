"""Unit tests of online join/leave and the frozen-set reconstruction."""

import copy

import numpy as np
import pytest

from fosmpc.dynamics import AgentParams, AgentState
from fosmpc.pnp import JoinRequest, infer_representations, leave, try_join
from fosmpc.safeset import (Ball, gamma_radius, overlap_strict,
                            radius_upper_bound)
from fosmpc.scenario import AgentConfig, ScenarioConfig
from fosmpc.sim import closed_loop_step, init_world


@pytest.fixture
def params():
    return AgentParams()


def two_agent_world(sep=20.0):
    cfg = ScenarioConfig(agents=[
        AgentConfig(0, p0=[0.0, 0.0], v0=[0, 0], p_ref=[1.0, 0.0]),
        AgentConfig(1, p0=[sep, 0.0], v0=[0, 0], p_ref=[sep - 1.0, 0.0])],
        max_steps=50)
    return cfg, init_world(cfg)


def test_representations_exact_when_disjoint(params):
    cfg, world = two_agent_world()
    reps = infer_representations(world)
    for i, rep in reps.items():
        ball = world.agents[i].safe_set.active
        assert np.allclose(rep.c, ball.c) and rep.R == pytest.approx(ball.R)


def test_single_agent_representation(params):
    cfg = ScenarioConfig(agents=[AgentConfig(0, p0=[0, 0], v0=[0, 0],
                                             p_ref=[1, 0])])
    world = init_world(cfg)
    reps = infer_representations(world)
    assert len(reps) == 1
    assert reps[0].R == pytest.approx(gamma_radius(0.0, params))


def test_representations_reconstruct_on_overlap(params):
    """Two fast, nearby agents with overlapping state-generated balls are
    both replaced by the history-free outer approximation."""
    cfg, world = two_agent_world()
    world.agents[0].state = AgentState(p=[0.0, 0.0], v=[3.0, 0.0])
    world.agents[1].state = AgentState(p=[1.0, 0.0], v=[-3.0, 0.0])
    reps = infer_representations(world)
    R_rec = 2 * radius_upper_bound(params) - params.r
    assert reps[0].R == pytest.approx(R_rec)
    assert reps[1].R == pytest.approx(R_rec)


def test_join_far_accepted(params):
    cfg, world = two_agent_world()
    req = JoinRequest(agent=AgentConfig(5, p0=[10.0, 10.0], v0=[0, 0],
                                        p_ref=[10.0, 0.0]), t_join=0)
    verdict = try_join(req, world, cfg)
    assert verdict.accepted
    assert 5 in world.agents and world.agents[5].active
    assert verdict.assigned.R == pytest.approx(gamma_radius(0.0, params))
    # Lemma-2 style containment of every representation held at the join
    assert all(g >= -1e-9 for g in verdict.containment_gaps.values())


def test_join_overlap_rejected_world_unchanged(params):
    cfg, world = two_agent_world()
    snapshot = copy.deepcopy(world)
    req = JoinRequest(agent=AgentConfig(5, p0=[0.3, 0.0], v0=[0, 0],
                                        p_ref=[5.0, 0.0]), t_join=0)
    verdict = try_join(req, world, cfg)
    assert not verdict.accepted
    assert "overlap with agent 0" in verdict.reason
    assert 5 not in world.agents
    assert world.t == snapshot.t
    for i in snapshot.agents:
        a, b = world.agents[i], snapshot.agents[i]
        assert np.array_equal(a.state.as_vec(), b.state.as_vec())
        assert np.array_equal(a.safe_set.active.c, b.safe_set.active.c)
        assert a.safe_set.active.R == b.safe_set.active.R
        assert a.J_hat == b.J_hat


def test_join_duplicate_id_rejected(params):
    cfg, world = two_agent_world()
    req = JoinRequest(agent=AgentConfig(0, p0=[10.0, 10.0], v0=[0, 0],
                                        p_ref=[0.0, 10.0]), t_join=0)
    assert not try_join(req, world, cfg).accepted


def test_leave_and_neighbor_shrink(params):
    cfg, world = two_agent_world()
    from fosmpc.ocp import build_problem
    assert len(build_problem(world, 0, cfg).neighbor_sets) <= 1
    leave(1, world)
    assert not world.agents[1].active
    assert build_problem(world, 0, cfg).neighbor_sets == []
    with pytest.raises(KeyError):
        leave(1, world)
    with pytest.raises(KeyError):
        leave(99, world)


def test_leave_unblocks_frozen_neighbor(params):
    """A frozen agent may shift again once the blocking agent leaves."""
    cfg = ScenarioConfig(agents=[
        AgentConfig(0, p0=[0.0, 0.0], v0=[0, 0], p_ref=[6.0, 0.0]),
        AgentConfig(1, p0=[3.0, 0.0], v0=[0, 0], p_ref=[3.0, 0.0])],
        max_steps=80)
    world = init_world(cfg)
    froze = False
    for _ in range(40):
        rec = closed_loop_step(world, cfg, strict=True)
        if rec.per_agent[0].frozen_next:
            froze = True
            break
    assert froze
    leave(1, world)
    for _ in range(5):
        rec = closed_loop_step(world, cfg, strict=True)
    assert not world.agents[0].safe_set.frozen
