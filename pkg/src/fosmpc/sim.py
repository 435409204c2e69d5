"""Closed-loop multi-agent coordinator.

Each step, every active agent solves its local dual-plan problem against a
shared read-only snapshot, all first inputs are applied simultaneously, the
candidate safe sets are generated from the measured successor states, and
the freeze-or-shift update keeps the active sets pairwise disjoint. The
module also carries the invariant checks, run metrics, and the desk-scale
brute-force oracle used to audit the solver.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import AgentParams, AgentState, ControlInput, step
from .environment import (CLEARANCE_SENTINEL, Obstacle, Workspace,  # noqa: F401
                          obstacle_clearance)
from .ocp import (FhocpSolution, FhocpSpec, J_HAT_INF, bound_update, build_problem,
                  braking_plan, candidate_solution, constraint_breakdown,
                  shift_candidate, simulate_contingency)
from .safeset import (ActiveSafeSet, Ball, fos_update, freeze_indicators,
                      generate_safe_set)
from .scenario import ScenarioConfig
from .solver import (SolveReport, SolverOptions, StepSolveResult,
                     solve_with_fallback)

# Invariant tolerances: geometric checks allow for accumulated rounding,
# the feasibility and identity checks mirror the planner guarantees.
GAP_TOL = 1e-9            # pairwise distance / disjointness slack [m]
CAND_RESIDUAL_TOL = 1e-8  # shifted-candidate feasibility against the new spec
COST_IDENTITY_TOL = 1e-8  # shifted-candidate cost vs. the updated bound
LYAP_TOL = 1e-6           # per-step decrease of the optimal backup cost
FOOTPRINT_TOL = 1e-6      # body-ball containment in the active set [m]
EQ_STABLE_TOL = 1e-4      # equilibrium considered unchanged below this [m]


class SimulationError(RuntimeError):
    """Strict-mode invariant violation, carrying the offending event."""

    def __init__(self, event: "SimEvent"):
        super().__init__(f"step {event.t}: {event.kind}: {event.detail}")
        self.event = event


@dataclass
class SimEvent:
    """Logged anomaly or lifecycle event."""

    t: int
    kind: str
    detail: str
    magnitude: float = 0.0


@dataclass
class AgentRuntime:
    """Mutable per-agent state carried between steps."""

    agent_id: int
    params: AgentParams
    state: AgentState
    ref: AgentState
    safe_set: ActiveSafeSet
    J_hat: float = J_HAT_INF
    last_solution: Optional[FhocpSolution] = None
    active: bool = True
    eq_prev: Optional[np.ndarray] = None
    stable_count: int = 0
    converged_at: Optional[int] = None
    parked: bool = False


@dataclass
class WorldState:
    """Shared snapshot: time index, agents, and static environment."""

    t: int
    agents: Dict[int, AgentRuntime]
    obstacles: List[Obstacle] = field(default_factory=list)
    workspace: Optional[Workspace] = None

    def active_ids(self) -> List[int]:
        return sorted(i for i, a in self.agents.items() if a.active)


@dataclass
class AgentStepLog:
    """One agent's slice of a step record (decision epoch t)."""

    state: np.ndarray          # x(t) before the input is applied
    u: np.ndarray              # applied shared first input
    ball: Ball                 # active safe set during the solve
    frozen: bool               # freeze flag attached to that set
    J_c: float
    J_hat: float
    status: str                # "optimal" or "fallback-used"
    residual: float
    used_fallback: bool
    candidate_residual: float
    shifted_cost_error: float  # nan when the bound was still infinite
    lyap_excess: float         # nan when the bound was still infinite
    eq_p: np.ndarray           # selected equilibrium position
    frozen_next: bool          # freeze decision taken at the end of the step


@dataclass
class StepRecord:
    """Append-only log entry for one closed-loop step."""

    t: int
    per_agent: Dict[int, AgentStepLog]
    min_pair_dist: float       # body distance at the measured successor states
    min_set_gap: float         # active-set center distance minus radius sum
    freeze_count: int
    events: List[SimEvent] = field(default_factory=list)


@dataclass
class RunMetrics:
    """Deterministic summary of one run's log."""

    steps: int = 0
    terminated_converged: bool = False
    collision_free: bool = True
    min_body_distance: float = math.inf
    min_set_gap: float = math.inf
    disjointness_violations: int = 0
    max_lyap_violation: float = 0.0
    max_candidate_residual: float = 0.0
    max_shifted_cost_error: float = 0.0
    fallback_count: int = 0
    freeze_steps: int = 0
    freeze_combos: set = field(default_factory=set)
    steps_to_convergence: Dict[int, Optional[int]] = field(default_factory=dict)
    Jc_series: Dict[int, List[float]] = field(default_factory=dict)
    events: List[SimEvent] = field(default_factory=list)

    def normalized_Jc(self, agent_id: int) -> np.ndarray:
        series = np.asarray(self.Jc_series.get(agent_id, []), dtype=float)
        if series.size == 0 or series[0] <= 0:
            return series
        return series / series[0]


def check_collision_free(states: Sequence[AgentState],
                         radii: Sequence[float]) -> Tuple[bool, float]:
    """Pairwise body-distance check; touching bodies are collision-free."""
    n = len(states)
    if n <= 1:
        return True, math.inf
    ok = True
    dmin = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(states[i].p - states[j].p))
            dmin = min(dmin, d - radii[i] - radii[j])
            if d < radii[i] + radii[j] - GAP_TOL:
                ok = False
    return ok, dmin


def min_set_gap(balls: Sequence[Ball]) -> float:
    """Smallest pairwise center distance minus radius sum; inf if < 2 sets."""
    n = len(balls)
    gap = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(balls[i].c - balls[j].c))
            gap = min(gap, d - balls[i].R - balls[j].R)
    return gap


def init_world(config: ScenarioConfig) -> WorldState:
    """World at t=0: every agent starts with its state-generated safe set and
    an inactive (infinite) cost bound."""
    agents: Dict[int, AgentRuntime] = {}
    for a in config.agents:
        state = AgentState(p=a.p0.copy(), v=a.v0.copy())
        ball = generate_safe_set(state, a.params)
        agents[a.agent_id] = AgentRuntime(
            agent_id=a.agent_id, params=a.params, state=state,
            ref=AgentState(p=a.p_ref.copy(), v=np.zeros(2)),
            safe_set=ActiveSafeSet(active=ball, frozen=False, prev=ball.copy()))
    return WorldState(t=0, agents=agents, obstacles=list(config.obstacles),
                      workspace=config.workspace)


def initial_feasibility_check(world: WorldState, config: ScenarioConfig) -> None:
    """Verify the standing feasibility assumptions before the loop starts."""
    ids = world.active_ids()
    states = [world.agents[i].state for i in ids]
    radii = [world.agents[i].params.r for i in ids]
    ok, _ = check_collision_free(states, radii)
    if not ok:
        raise SimulationError(SimEvent(0, "collision", "initial states collide"))
    gap = min_set_gap([world.agents[i].safe_set.active for i in ids])
    if gap < -GAP_TOL:
        raise SimulationError(SimEvent(0, "overlap",
                                       f"initial safe sets overlap (gap {gap:.3e})"))
    for i in ids:
        spec = build_problem(world, i, config)
        if not spec.footprint_ok(FOOTPRINT_TOL):
            raise SimulationError(SimEvent(
                0, "footprint", f"agent {i} starts outside its safe set"))
        cand = candidate_solution(
            braking_plan(spec.x0, spec.horizons.N_c, spec.params), spec)
        if cand.residual > CAND_RESIDUAL_TOL:
            worst = max(constraint_breakdown(cand, spec).items(), key=lambda kv: kv[1])
            raise SimulationError(SimEvent(
                0, "infeasible-start",
                f"agent {i}: braking plan violates '{worst[0]}' by {worst[1]:.3e}"))


def closed_loop_step(world: WorldState, config: ScenarioConfig,
                     options: Optional[SolverOptions] = None,
                     executor: Optional[ThreadPoolExecutor] = None,
                     strict: bool = False) -> StepRecord:
    """One synchronous step of the coordination loop.

    Solve (parallelizable, snapshot read-only), apply all first inputs
    simultaneously, generate candidate sets from the measured states, run the
    freeze-or-shift update, decrease each cost bound by the realized backup
    stage cost, and attach the invariant-check results.
    """
    opts = options or config.solver
    t = world.t
    ids = world.active_ids()
    record = StepRecord(t=t, per_agent={}, min_pair_dist=math.inf,
                        min_set_gap=math.inf, freeze_count=0)

    def emit(event: SimEvent) -> None:
        record.events.append(event)
        if strict:
            raise SimulationError(event)

    specs = {i: build_problem(world, i, config) for i in ids}
    for i in ids:
        if not specs[i].footprint_ok(FOOTPRINT_TOL):
            gap = (np.linalg.norm(specs[i].x0.p - specs[i].active_set.c)
                   - specs[i].active_set.R + specs[i].params.r)
            emit(SimEvent(t, "footprint",
                          f"agent {i} body leaves its active set", float(gap)))

    # Parking: once an agent sits essentially at its reference and is slow
    # enough to stop within the remaining tolerance, it commits to the
    # guaranteed candidate (brake to rest) instead of re-optimizing. That is
    # always a legal step of the scheme, it pins the selected equilibrium
    # exactly, and it ends the asymptotic crawl the shrinking cost bound
    # would otherwise impose near the reference.
    for i in ids:
        agent = world.agents[i]
        d_ref = float(np.linalg.norm(agent.state.p - agent.ref.p))
        if agent.parked:
            if d_ref > config.eps_conv:
                agent.parked = False
        elif (agent.last_solution is not None
              and d_ref <= 0.5 * config.eps_conv
              and float(np.linalg.norm(agent.state.v))
              <= specs[i].params.Ts * specs[i].params.a_max):
            agent.parked = True

    def solve_one(i: int):
        agent = world.agents[i]
        if agent.parked and agent.last_solution is not None:
            cand_sol = candidate_solution(
                shift_candidate(agent.last_solution, specs[i].params), specs[i])
            cand_sol.diagnostics["candidate_residual"] = cand_sol.residual
            report = SolveReport(converged=False, outer_iters=0, inner_iters=0,
                                 penalty_violation=0.0, projected_grad_norm=0.0,
                                 objective_value=cand_sol.J, message="parked")
            cand_sol.diagnostics["report"] = report
            return StepSolveResult(solution=cand_sol, candidate=cand_sol,
                                   used_fallback=False, report=report)
        return solve_with_fallback(specs[i], prev=agent.last_solution,
                                   options=opts)
    if executor is not None:
        results = dict(zip(ids, executor.map(solve_one, ids)))
    else:
        results = {i: solve_one(i) for i in ids}

    inputs: Dict[int, np.ndarray] = {}
    for i in ids:
        agent = world.agents[i]
        res = results[i]
        sol = res.solution
        spec = specs[i]
        u0 = sol.contingency.inputs[0].copy()
        inputs[i] = u0

        cand_res = float(res.candidate.residual)
        if cand_res > CAND_RESIDUAL_TOL:
            emit(SimEvent(t, "candidate-infeasible",
                          f"agent {i} shifted candidate residual {cand_res:.3e}",
                          cand_res))
        shifted_err = math.nan
        lyap_excess = math.nan
        if math.isfinite(spec.J_hat):
            shifted_err = abs(res.candidate.J_c - spec.J_hat)
            if shifted_err > COST_IDENTITY_TOL:
                emit(SimEvent(t, "shifted-cost",
                              f"agent {i} shifted cost off the bound by "
                              f"{shifted_err:.3e}", shifted_err))
            lyap_excess = max(0.0, sol.J_c - spec.J_hat)
            if lyap_excess > LYAP_TOL:
                emit(SimEvent(t, "lyap-violation",
                              f"agent {i} backup cost above bound by "
                              f"{lyap_excess:.3e}", lyap_excess))

        eq = sol.contingency.eq
        e = sol.contingency.states[0] - eq.x_bar.as_vec()
        du = u0 - eq.u_bar.u
        try:
            agent.J_hat = bound_update(sol.J_c, e, du, config.weights)
        except ArithmeticError as exc:
            emit(SimEvent(t, "lyap-violation", f"agent {i}: {exc}", math.inf))
            agent.J_hat = 0.0
        agent.last_solution = sol

        eq_p = eq.x_bar.p.copy()
        near = float(np.linalg.norm(agent.state.p - eq_p)) <= config.eps_conv
        steady = (agent.eq_prev is not None
                  and float(np.linalg.norm(eq_p - agent.eq_prev)) <= EQ_STABLE_TOL)
        agent.stable_count = agent.stable_count + 1 if (near and steady) else 0
        agent.eq_prev = eq_p
        at_ref = float(np.linalg.norm(agent.state.p - agent.ref.p)) <= config.eps_conv
        if at_ref and agent.converged_at is None:
            agent.converged_at = t
        elif not at_ref:
            agent.converged_at = None

        record.per_agent[i] = AgentStepLog(
            state=agent.state.as_vec(), u=u0, ball=spec.active_set,
            frozen=agent.safe_set.frozen, J_c=sol.J_c, J_hat=spec.J_hat,
            status=("parked" if agent.parked
                    else "fallback-used" if res.used_fallback else "optimal"),
            residual=float(sol.residual), used_fallback=res.used_fallback,
            candidate_residual=cand_res, shifted_cost_error=shifted_err,
            lyap_excess=lyap_excess, eq_p=eq_p, frozen_next=False)

    for i in ids:
        agent = world.agents[i]
        agent.state = step(agent.state, ControlInput(inputs[i]), agent.params)

    candidates = [generate_safe_set(world.agents[i].state, world.agents[i].params)
                  for i in ids]
    actives = [world.agents[i].safe_set.active for i in ids]
    if config.disable_fos:
        chi = [False] * len(ids)
        new_actives = [b.copy() for b in candidates]
    else:
        chi = freeze_indicators(candidates, actives)
        new_actives = fos_update(candidates, actives, chi)
    for k, i in enumerate(ids):
        agent = world.agents[i]
        agent.safe_set = ActiveSafeSet(active=new_actives[k], frozen=chi[k],
                                       prev=agent.safe_set.active)
        record.per_agent[i].frozen_next = chi[k]
    record.freeze_count = sum(chi)

    states = [world.agents[i].state for i in ids]
    radii = [world.agents[i].params.r for i in ids]
    ok, dmin = check_collision_free(states, radii)
    record.min_pair_dist = dmin
    if not ok:
        emit(SimEvent(t, "collision",
                      f"body overlap at successor states (gap {dmin:.3e})", dmin))
    gap = min_set_gap(new_actives)
    record.min_set_gap = gap
    if gap < -GAP_TOL:
        emit(SimEvent(t, "overlap",
                      f"active safe sets overlap (gap {gap:.3e})", gap))

    world.t += 1
    return record


def _fold_record(metrics: RunMetrics, record: StepRecord) -> None:
    metrics.steps += 1
    metrics.min_body_distance = min(metrics.min_body_distance, record.min_pair_dist)
    metrics.min_set_gap = min(metrics.min_set_gap, record.min_set_gap)
    metrics.freeze_steps += record.freeze_count
    n = len(record.per_agent)
    n_frozen = record.freeze_count
    if n - n_frozen >= 2:
        metrics.freeze_combos.add((False, False))
    if n_frozen >= 2:
        metrics.freeze_combos.add((True, True))
    if n_frozen >= 1 and n - n_frozen >= 1:
        metrics.freeze_combos.update({(True, False), (False, True)})
    for i, log in record.per_agent.items():
        metrics.fallback_count += int(log.used_fallback)
        metrics.max_candidate_residual = max(metrics.max_candidate_residual,
                                             log.candidate_residual)
        if math.isfinite(log.shifted_cost_error):
            metrics.max_shifted_cost_error = max(metrics.max_shifted_cost_error,
                                                 log.shifted_cost_error)
        if math.isfinite(log.lyap_excess):
            metrics.max_lyap_violation = max(metrics.max_lyap_violation,
                                             log.lyap_excess)
        metrics.Jc_series.setdefault(i, []).append(log.J_c)
    for ev in record.events:
        metrics.events.append(ev)
        if ev.kind == "collision":
            metrics.collision_free = False
        elif ev.kind == "overlap":
            metrics.disjointness_violations += 1


def run_scenario(config: ScenarioConfig, strict: bool = False,
                 parallel: int = 0) -> Tuple[RunMetrics, List[StepRecord]]:
    """Run the closed loop until convergence or the step limit.

    Terminates once every active agent sits within `eps_conv` of an unchanged
    equilibrium for `K_stable` consecutive steps and no scheduled join/leave
    remains. `parallel` > 1 solves the per-agent problems on that many
    threads; results are independent of the schedule.
    """
    from . import pnp  # deferred: pnp builds on this module's world types

    metrics = RunMetrics()
    records: List[StepRecord] = []
    if not config.agents and not config.pnp_events:
        return metrics, records
    world = init_world(config)
    if world.agents:
        initial_feasibility_check(world, config)
    last_event_t = max((ev.t for ev in config.pnp_events), default=-1)
    pending = sorted(config.pnp_events, key=lambda ev: ev.t)

    executor = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None
    try:
        while world.t < config.max_steps:
            while pending and pending[0].t == world.t:
                ev = pending.pop(0)
                if ev.kind == "join":
                    verdict = pnp.try_join(pnp.JoinRequest(
                        agent=ev.agent, t_join=world.t), world, config)
                    kind = "join-accepted" if verdict.accepted else "join-rejected"
                    metrics.events.append(SimEvent(
                        world.t, kind,
                        f"agent {ev.agent.agent_id}: {verdict.reason}"))
                else:
                    pnp.leave(ev.agent_id, world)
                    metrics.events.append(SimEvent(
                        world.t, "leave", f"agent {ev.agent_id} left"))
            record = closed_loop_step(world, config, options=config.solver,
                                      executor=executor, strict=strict)
            records.append(record)
            _fold_record(metrics, record)
            active = [world.agents[i] for i in world.active_ids()]
            if (world.t > last_event_t and active
                    and all(a.stable_count >= config.K_stable for a in active)):
                metrics.terminated_converged = True
                break
            if not active and not pending:
                break
    finally:
        if executor is not None:
            executor.shutdown()
    for i, agent in sorted(world.agents.items()):
        metrics.steps_to_convergence[i] = agent.converged_at
    return metrics, records


@dataclass
class OracleResult:
    feasible: bool
    best_cost: float = math.inf
    best_inputs: Optional[np.ndarray] = None


def oracle_bruteforce(spec: FhocpSpec, levels: Optional[Sequence[float]] = None,
                      feas_tol: float = 1e-9) -> OracleResult:
    """Exhaustive backup-plan search for one-dimensional desk-scale instances.

    Enumerates every input sequence on the level grid (x-axis only),
    simulates it, and judges feasibility with the same residual used
    everywhere else. Intended as an independent audit of the solver.
    """
    p = spec.params
    if abs(spec.x0.v[1]) > 0 or abs(spec.x0.p[1] - spec.active_set.c[1]) > 0:
        raise ValueError("oracle requires a one-dimensional instance")
    if levels is None:
        levels = (-p.a_max, 0.0, p.a_max)
    N_c = spec.horizons.N_c
    if len(levels) ** N_c > 10 ** 6:
        raise ValueError("input grid too large for exhaustive search")
    best = OracleResult(feasible=False)
    for seq in itertools.product(levels, repeat=N_c):
        inputs = np.zeros((N_c, 2))
        inputs[:, 0] = seq
        sol = candidate_solution(simulate_contingency(spec.x0, inputs, p), spec)
        if sol.residual <= feas_tol and sol.J_c < best.best_cost:
            best = OracleResult(feasible=True, best_cost=sol.J_c,
                                best_inputs=inputs.copy())
    return best
