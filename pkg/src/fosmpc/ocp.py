"""Local dual-plan optimal control problem: costs, constraints, residuals,
the shifted backup candidate, and the recursively maintained cost bound.

Plans are stored as stacked arrays (rows [px, py, vx, vy] for states,
[ax, ay] for inputs); `AgentState` objects appear only at the interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from .dynamics import AgentParams, AgentState, ControlInput, EquilibriumPair, step_vec
from .environment import Obstacle, Workspace, clearance
from .safeset import Ball, gamma_radius

if TYPE_CHECKING:  # pragma: no cover
    from .sim import WorldState

# Bound value meaning "constraint inactive" (before the first update).
J_HAT_INF = math.inf


@dataclass
class Horizons:
    N_n: int = 20
    N_c: int = 10

    def __post_init__(self):
        if self.N_n < 1 or self.N_c < 1:
            raise ValueError("horizons must be at least 1")


@dataclass
class CostWeights:
    """Diagonal weights of the tracking and backup-plan costs."""

    Q_p: np.ndarray = field(default_factory=lambda: np.ones(2))
    Q_v: np.ndarray = field(default_factory=lambda: np.ones(2))
    R_u: np.ndarray = field(default_factory=lambda: np.ones(2))
    P_s: np.ndarray = field(default_factory=lambda: np.ones(4))
    Q_s: np.ndarray = field(default_factory=lambda: 0.1 * np.ones(4))
    R_s: np.ndarray = field(default_factory=lambda: 0.1 * np.ones(2))
    gamma: float = 0.1
    rho_nom: float = 100.0

    def __post_init__(self):
        for name in ("Q_p", "Q_v", "R_u", "P_s", "Q_s", "R_s"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            setattr(self, name, arr)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.rho_nom < 0:
            raise ValueError("rho_nom must be nonnegative")


@dataclass
class ContingencyPlan:
    """Backup trajectory ending at a holdable rest equilibrium."""

    states: np.ndarray        # (N_c+1, 4)
    inputs: np.ndarray        # (N_c, 2)
    eq: EquilibriumPair

    @property
    def N_c(self) -> int:
        return self.inputs.shape[0]

    def copy(self) -> "ContingencyPlan":
        return ContingencyPlan(states=self.states.copy(), inputs=self.inputs.copy(),
                               eq=EquilibriumPair(self.eq.x_bar.copy(),
                                                  ControlInput(self.eq.u_bar.u.copy())))


@dataclass
class NominalPlan:
    """Performance trajectory; couples to the backup only via the first input."""

    states: np.ndarray        # (N_n+1, 4)
    inputs: np.ndarray        # (N_n, 2)
    slacks: np.ndarray        # (n_neighbors, N_n), nonnegative

    @property
    def N_n(self) -> int:
        return self.inputs.shape[0]

    def copy(self) -> "NominalPlan":
        return NominalPlan(states=self.states.copy(), inputs=self.inputs.copy(),
                           slacks=self.slacks.copy())


@dataclass
class FhocpSpec:
    """One agent's local problem data at one time step."""

    agent_id: int
    params: AgentParams
    x0: AgentState
    active_set: Ball
    neighbor_sets: List[Ball]
    obstacles: List[Obstacle]
    x_ref: AgentState
    J_hat: float
    horizons: Horizons
    weights: CostWeights
    workspace: Optional[Workspace] = None
    enforce_tail: bool = True
    enforce_lyap: bool = True

    def footprint_ok(self, tol: float = 1e-6) -> bool:
        gap = self.active_set.R - self.params.r - \
            float(np.linalg.norm(self.x0.p - self.active_set.c))
        return gap >= -tol


@dataclass
class FhocpSolution:
    nominal: NominalPlan
    contingency: ContingencyPlan
    J: float
    J_c: float
    residual: float
    diagnostics: dict = field(default_factory=dict)

    def copy(self) -> "FhocpSolution":
        return FhocpSolution(nominal=self.nominal.copy(),
                             contingency=self.contingency.copy(),
                             J=self.J, J_c=self.J_c, residual=self.residual,
                             diagnostics=dict(self.diagnostics))


def min_contingency_horizon(params: AgentParams) -> int:
    """One shared first step plus enough steps to brake to rest from v_max."""
    return 1 + math.ceil(params.v_max / (params.a_min_mag * params.Ts))


def stage_cost_c(e: np.ndarray, du: np.ndarray, w: CostWeights) -> float:
    """Backup stage cost in equilibrium-error coordinates."""
    e = np.asarray(e, dtype=float).reshape(4)
    du = np.asarray(du, dtype=float).reshape(2)
    return float(np.dot(w.Q_s, e * e) + np.dot(w.R_s, du * du))


def offset_cost(x_bar_vec: np.ndarray, x_ref: AgentState, w: CostWeights) -> float:
    d = np.asarray(x_bar_vec, dtype=float).reshape(4) - x_ref.as_vec()
    return float(np.dot(w.P_s, d * d))


def contingency_cost(plan: ContingencyPlan, x_ref: AgentState, w: CostWeights) -> float:
    """Sum of backup stage costs plus the equilibrium-offset term."""
    xb = plan.eq.x_bar.as_vec()
    ub = plan.eq.u_bar.u
    E = plan.states[:-1] - xb
    dU = plan.inputs - ub
    total = float(np.sum((E * E) @ w.Q_s) + np.sum((dU * dU) @ w.R_s))
    return total + offset_cost(xb, x_ref, w)


def soft_separation_distances(nom_states: np.ndarray, neighbor_sets: Sequence[Ball],
                              params: AgentParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-(neighbor, stage) required distances and actual squared distances.

    The required distance at stage k is the generator radius at the predicted
    nominal state plus the neighbor's reconstructed active radius.
    """
    N_n = nom_states.shape[0] - 1
    P = nom_states[:N_n, :2]
    speeds = np.linalg.norm(nom_states[:N_n, 2:], axis=1)
    R_self = gamma_radius(speeds, params)
    n = len(neighbor_sets)
    d_req = np.empty((n, N_n))
    dist2 = np.empty((n, N_n))
    for j, ball in enumerate(neighbor_sets):
        d_req[j] = R_self + ball.R
        diff = P - ball.c
        dist2[j] = np.sum(diff * diff, axis=1)
    return d_req, dist2


def minimal_slacks(nom_states: np.ndarray, neighbor_sets: Sequence[Ball],
                   params: AgentParams) -> np.ndarray:
    """Smallest nonnegative slacks satisfying the soft separation constraint."""
    N_n = nom_states.shape[0] - 1
    if not neighbor_sets:
        return np.zeros((0, N_n))
    d_req, dist2 = soft_separation_distances(nom_states, neighbor_sets, params)
    return np.maximum(0.0, d_req * d_req - dist2)


def nominal_objective(nom: NominalPlan, x_ref: AgentState, eq: EquilibriumPair,
                      w: CostWeights) -> float:
    """Tracking stages, terminal position term, weighted equilibrium offset,
    and the linear slack penalty."""
    p_ref = x_ref.p
    P = nom.states[:, :2]
    V = nom.states[:-1, 2:]
    dP = P[:-1] - p_ref
    total = float(np.sum((dP * dP) @ w.Q_p) + np.sum((V * V) @ w.Q_v)
                  + np.sum((nom.inputs * nom.inputs) @ w.R_u))
    dT = P[-1] - p_ref
    total += float(np.dot(w.Q_p, dT * dT))
    total += w.gamma * offset_cost(eq.x_bar.as_vec(), x_ref, w)
    total += w.rho_nom * float(np.sum(nom.slacks))
    return total


def _chain_residual(states: np.ndarray, inputs: np.ndarray, Ts: float) -> float:
    pred = step_vec(states[:-1], inputs, Ts)
    return float(np.max(np.linalg.norm(pred - states[1:], axis=1), initial=0.0))


def tail_violation(plan_states: np.ndarray, params: AgentParams) -> float:
    """Largest violation of the suffix-containment requirement (distance units)."""
    P = plan_states[:, :2]
    speeds = np.linalg.norm(plan_states[:, 2:], axis=1)
    allowed = gamma_radius(speeds, params) - params.r
    N = P.shape[0] - 1
    worst = 0.0
    for k in range(N):
        d = np.linalg.norm(P[k + 1:] - P[k], axis=1)
        worst = max(worst, float(np.max(d - allowed[k], initial=0.0)))
    return worst


def constraint_breakdown(sol: FhocpSolution, spec: FhocpSpec) -> dict:
    """Violation magnitude of every constraint group of the local problem."""
    p = spec.params
    Ts = p.Ts
    x0 = spec.x0.as_vec()
    nom, con = sol.nominal, sol.contingency
    xb = con.eq.x_bar.as_vec()
    ub = con.eq.u_bar.u
    out = {}

    out["init"] = max(float(np.linalg.norm(nom.states[0] - x0)),
                      float(np.linalg.norm(con.states[0] - x0)))
    out["shared_input"] = float(np.linalg.norm(nom.inputs[0] - con.inputs[0]))
    out["dynamics"] = max(_chain_residual(nom.states, nom.inputs, Ts),
                          _chain_residual(con.states, con.inputs, Ts))

    v_nom = np.linalg.norm(nom.states[1:, 2:], axis=1)
    v_con = np.linalg.norm(con.states[1:, 2:], axis=1)
    u_nom = np.linalg.norm(nom.inputs, axis=1)
    u_con = np.linalg.norm(con.inputs, axis=1)
    out["state_bounds"] = max(float(np.max(v_nom - p.v_max, initial=0.0)),
                              float(np.max(v_con - p.v_max, initial=0.0)))
    out["input_bounds"] = max(float(np.max(u_nom - p.a_max, initial=0.0)),
                              float(np.max(u_con - p.a_max, initial=0.0)))

    out["obstacles"] = max((max(0.0, -clearance(q, p.r, spec.obstacles, spec.workspace))
                            for q in con.states[:, :2]), default=0.0)

    out["terminal_state"] = float(np.linalg.norm(con.states[-1] - xb))
    eq_next = step_vec(xb, ub, Ts)
    out["terminal_equilibrium"] = max(
        float(np.linalg.norm(eq_next - xb)),
        float(np.linalg.norm(xb[2:])) - p.v_max if np.linalg.norm(xb[2:]) > p.v_max else 0.0,
        float(np.linalg.norm(ub)) - p.a_max if np.linalg.norm(ub) > p.a_max else 0.0)
    out["terminal_position"] = max(0.0, float(np.linalg.norm(xb[:2] - spec.active_set.c))
                                   - spec.active_set.R)

    d_active = np.linalg.norm(con.states[:, :2] - spec.active_set.c, axis=1)
    out["containment"] = float(np.max(d_active - (spec.active_set.R - p.r), initial=0.0))

    out["tail"] = tail_violation(con.states, p) if spec.enforce_tail else 0.0

    if spec.enforce_lyap and math.isfinite(spec.J_hat):
        out["lyapunov"] = max(0.0, contingency_cost(con, spec.x_ref, spec.weights)
                              - spec.J_hat)
    else:
        out["lyapunov"] = 0.0

    if spec.neighbor_sets:
        d_req, dist2 = soft_separation_distances(nom.states, spec.neighbor_sets, p)
        viol2 = d_req * d_req - dist2 - nom.slacks
        out["soft_separation"] = max(float(np.max(viol2, initial=0.0)),
                                     float(np.max(-nom.slacks, initial=0.0)))
    else:
        out["soft_separation"] = 0.0
    return out


def constraint_residual(sol: FhocpSolution, spec: FhocpSpec) -> float:
    """Maximum violation over all constraints of the local problem."""
    return max(constraint_breakdown(sol, spec).values())


def simulate_contingency(x0: AgentState, inputs: np.ndarray, params: AgentParams) -> ContingencyPlan:
    """Roll the dynamics forward and package the result as a backup plan.

    The terminal equilibrium is the terminal position at rest; validity of
    that pairing is a constraint, not an assumption, of the caller.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    N = inputs.shape[0]
    states = np.empty((N + 1, 4))
    states[0] = x0.as_vec()
    for k in range(N):
        states[k + 1] = step_vec(states[k], inputs[k], params.Ts)
    eq = EquilibriumPair(AgentState(p=states[-1, :2].copy(), v=np.zeros(2)),
                         ControlInput(np.zeros(2)))
    return ContingencyPlan(states=states, inputs=inputs.copy(), eq=eq)


def braking_inputs(x0: AgentState, N_c: int, params: AgentParams) -> np.ndarray:
    """Maximal straight-line braking to rest, padded with zeros."""
    inputs = np.zeros((N_c, 2))
    v = x0.v.copy()
    for k in range(N_c):
        s = float(np.linalg.norm(v))
        if s <= 1e-15:
            break
        mag = min(params.a_max, params.a_min_mag, s / params.Ts)
        u = -(mag / s) * v
        inputs[k] = u
        v = v + params.Ts * u
    return inputs


def braking_plan(x0: AgentState, N_c: int, params: AgentParams) -> ContingencyPlan:
    return simulate_contingency(x0, braking_inputs(x0, N_c, params), params)


def shift_candidate(prev: FhocpSolution, params: AgentParams) -> ContingencyPlan:
    """Previous backup plan advanced one step and padded with the equilibrium
    input; the constructive witness of next-step feasibility."""
    con = prev.contingency
    N_c = con.N_c
    states = np.empty_like(con.states)
    inputs = np.empty_like(con.inputs)
    states[:N_c] = con.states[1:]
    inputs[:N_c - 1] = con.inputs[1:]
    inputs[N_c - 1] = con.eq.u_bar.u
    states[N_c] = step_vec(states[N_c - 1], inputs[N_c - 1], params.Ts)
    eq = EquilibriumPair(con.eq.x_bar.copy(), ControlInput(con.eq.u_bar.u.copy()))
    return ContingencyPlan(states=states, inputs=inputs, eq=eq)


def complete_nominal(cand: ContingencyPlan, N_n: int, neighbor_sets: Sequence[Ball],
                     params: AgentParams) -> NominalPlan:
    """Nominal plan chosen identical to the backup plan, held at equilibrium
    (or truncated) to match the nominal horizon."""
    N_c = cand.N_c
    if N_n <= N_c:
        states = cand.states[:N_n + 1].copy()
        inputs = cand.inputs[:N_n].copy()
    else:
        states = np.vstack([cand.states,
                            np.repeat(cand.states[-1:], N_n - N_c, axis=0)])
        inputs = np.vstack([cand.inputs,
                            np.repeat(cand.eq.u_bar.u[None, :], N_n - N_c, axis=0)])
        for k in range(N_c, N_n):
            states[k + 1] = step_vec(states[k], inputs[k], params.Ts)
    slacks = minimal_slacks(states, neighbor_sets, params)
    return NominalPlan(states=states, inputs=inputs, slacks=slacks)


def candidate_solution(cand: ContingencyPlan, spec: FhocpSpec) -> FhocpSolution:
    """Package a backup candidate (with identical nominal part) as a solution."""
    nom = complete_nominal(cand, spec.horizons.N_n, spec.neighbor_sets, spec.params)
    J_c = contingency_cost(cand, spec.x_ref, spec.weights)
    J = nominal_objective(nom, spec.x_ref, cand.eq, spec.weights)
    sol = FhocpSolution(nominal=nom, contingency=cand.copy(), J=J, J_c=J_c,
                        residual=0.0)
    sol.residual = constraint_residual(sol, spec)
    return sol


def bound_update(J_star_prev: float, e: np.ndarray, du: np.ndarray,
                 w: CostWeights, tol: float = 1e-9) -> float:
    """Decrease the cost bound by the realized backup stage cost."""
    if J_star_prev < 0:
        raise ValueError("bound must be nonnegative")
    if math.isinf(J_star_prev):
        return J_star_prev
    ell = stage_cost_c(e, du, w)
    out = J_star_prev - ell
    if out < -tol * max(1.0, abs(J_star_prev)):
        raise ArithmeticError(
            f"stage cost {ell} exceeds previous total {J_star_prev}")
    return out


def build_problem(world: "WorldState", agent_id: int, config) -> FhocpSpec:
    """Assemble one agent's local problem from a shared world snapshot.

    Neighbor sets are the other active agents' active balls: the simulator
    carries explicitly what each agent could deterministically reconstruct
    from observed states plus one-step memory.
    """
    if agent_id not in world.agents or not world.agents[agent_id].active:
        raise KeyError(f"no active agent with id {agent_id}")
    me = world.agents[agent_id]
    # A neighbor whose ball cannot be reached by any admissible nominal plan
    # can never activate the separation constraint; drop it from the problem.
    reach = (me.params.Ts * config.horizons.N_n * me.params.v_max
             + gamma_radius(me.params.v_max, me.params) + 0.1)
    neighbor_sets = [a.safe_set.active.copy() for i, a in sorted(world.agents.items())
                     if i != agent_id and a.active
                     and float(np.linalg.norm(a.safe_set.active.c - me.state.p))
                     <= reach + a.safe_set.active.R]
    return FhocpSpec(
        agent_id=agent_id,
        params=me.params,
        x0=me.state.copy(),
        active_set=me.safe_set.active.copy(),
        neighbor_sets=neighbor_sets,
        obstacles=list(world.obstacles),
        x_ref=me.ref.copy(),
        J_hat=me.J_hat,
        horizons=config.horizons,
        weights=config.weights,
        workspace=world.workspace,
        enforce_tail=not getattr(config, "disable_tail_constraint", False),
        enforce_lyap=not getattr(config, "disable_lyap_constraint", False),
    )
