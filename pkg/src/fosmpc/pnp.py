"""Online join and leave of agents.

A joining agent only observes current states, not set histories, so every
incumbent is represented by a ball that provably contains its active safe
set: the exact state-generated ball when the evidence says the incumbent
shifted, and the history-free outer approximation when it may have frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .dynamics import AgentState
from .ocp import (FhocpSpec, J_HAT_INF, braking_plan, candidate_solution,
                  constraint_breakdown)
from .safeset import (ActiveSafeSet, Ball, generate_safe_set, overlap_strict,
                      radius_upper_bound, reconstruction_ball)
from .scenario import AgentConfig
from .sim import CAND_RESIDUAL_TOL, AgentRuntime, WorldState


@dataclass
class JoinRequest:
    """A new agent asking to enter the running world."""

    agent: AgentConfig
    t_join: int


@dataclass
class JoinVerdict:
    """Outcome of a join attempt; rejection is a verdict, not an error."""

    accepted: bool
    assigned: Optional[Ball] = None
    reason: str = ""
    containment_gaps: Dict[int, float] = field(default_factory=dict)


def infer_representations(world: WorldState) -> Dict[int, Ball]:
    """Outer approximations of the incumbents' active sets from states alone.

    An incumbent whose state-generated ball overlaps another incumbent's
    state-generated ball cannot have shifted at the last update, so it is
    represented by the history-free reconstruction ball. Because a freeze can
    also be caused by overlap with an (invisible) frozen neighbor's set, any
    agent whose state-generated ball touches a reconstruction ball is
    conservatively reconstructed as well, iterated to a fixed point.
    """
    ids = world.active_ids()
    gammas = {j: generate_safe_set(world.agents[j].state, world.agents[j].params)
              for j in ids}
    flagged = set()
    for j in ids:
        for k in ids:
            if k != j and overlap_strict(gammas[j], gammas[k]):
                flagged.add(j)
                break
    changed = True
    while changed:
        changed = False
        for j in ids:
            if j in flagged:
                continue
            for k in flagged:
                rec = _reconstruction(world, k)
                if overlap_strict(gammas[j], rec):
                    flagged.add(j)
                    changed = True
                    break
    reps = {}
    for j in ids:
        reps[j] = _reconstruction(world, j) if j in flagged else gammas[j].copy()
    return reps


def _reconstruction(world: WorldState, j: int) -> Ball:
    agent = world.agents[j]
    return reconstruction_ball(agent.state.p, radius_upper_bound(agent.params),
                               agent.params.r)


def try_join(req: JoinRequest, world: WorldState, config) -> JoinVerdict:
    """Admit the requester iff its state-generated ball is disjoint from every
    incumbent representation and its own local problem has a feasible backup.

    A rejected request leaves the world untouched.
    """
    a = req.agent
    if a.agent_id in world.agents:
        return JoinVerdict(accepted=False, reason=f"id {a.agent_id} already used")
    if float(np.linalg.norm(a.v0)) > a.params.v_max + 1e-12:
        return JoinVerdict(accepted=False, reason="initial speed exceeds v_max")
    state = AgentState(p=a.p0.copy(), v=a.v0.copy())
    candidate = generate_safe_set(state, a.params)

    reps = infer_representations(world)
    gaps = {}
    for j, rep in sorted(reps.items()):
        true = world.agents[j].safe_set.active
        gaps[j] = rep.R - (float(np.linalg.norm(rep.c - true.c)) + true.R)
        if overlap_strict(candidate, rep):
            return JoinVerdict(accepted=False,
                               reason=f"overlap with agent {j}",
                               containment_gaps=gaps)

    spec = FhocpSpec(
        agent_id=a.agent_id, params=a.params, x0=state, active_set=candidate,
        neighbor_sets=[rep.copy() for _, rep in sorted(reps.items())],
        obstacles=list(world.obstacles),
        x_ref=AgentState(p=a.p_ref.copy(), v=np.zeros(2)),
        J_hat=J_HAT_INF, horizons=config.horizons, weights=config.weights,
        workspace=world.workspace)
    witness = candidate_solution(
        braking_plan(state, config.horizons.N_c, a.params), spec)
    if witness.residual > CAND_RESIDUAL_TOL:
        worst = max(constraint_breakdown(witness, spec).items(),
                    key=lambda kv: kv[1])
        return JoinVerdict(accepted=False,
                           reason=f"local problem infeasible ('{worst[0]}' "
                                  f"violated by {worst[1]:.3e})",
                           containment_gaps=gaps)

    world.agents[a.agent_id] = AgentRuntime(
        agent_id=a.agent_id, params=a.params, state=state,
        ref=AgentState(p=a.p_ref.copy(), v=np.zeros(2)),
        safe_set=ActiveSafeSet(active=candidate, frozen=False,
                               prev=candidate.copy()),
        J_hat=J_HAT_INF)
    return JoinVerdict(accepted=True, assigned=candidate.copy(),
                       reason="accepted", containment_gaps=gaps)


def leave(agent_id: int, world: WorldState) -> None:
    """Deactivate an agent; it disappears from every later problem build."""
    if agent_id not in world.agents or not world.agents[agent_id].active:
        raise KeyError(f"no active agent with id {agent_id}")
    world.agents[agent_id].active = False
