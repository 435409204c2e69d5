"""Decentralized contingency MPC with freeze-or-shift safe sets.

Library layers, bottom up: agent dynamics, safe-set geometry, the local
dual-plan optimal control problem, its solver, the closed-loop multi-agent
simulator, online join/leave, and a scenario-driven command line interface.
"""

from .dynamics import (AgentParams, AgentState, ControlInput, DoubleIntegrator,
                       EquilibriumPair, check_admissible, is_equilibrium, step)
from .environment import Obstacle, Workspace, obstacle_clearance
from .ocp import (CostWeights, FhocpSolution, FhocpSpec, Horizons, J_HAT_INF,
                  bound_update, build_problem, contingency_cost,
                  constraint_residual, min_contingency_horizon, shift_candidate)
from .safeset import (ActiveSafeSet, Ball, fos_update, freeze_indicators,
                      gamma_radius, generate_safe_set, overlap_strict,
                      radius_upper_bound, reconstruction_ball)
from .scenario import (AgentConfig, PnpEvent, ScenarioConfig, ScenarioError,
                       load_scenario, preset, random_scenario)
from .sim import (RunMetrics, SimulationError, StepRecord, WorldState,
                  check_collision_free, closed_loop_step, init_world,
                  oracle_bruteforce, run_scenario)
from .solver import (SolveReport, SolverOptions, solve_fhocp,
                     solve_with_fallback)

__version__ = "0.1.0"

__all__ = [
    "AgentParams", "AgentState", "ControlInput", "DoubleIntegrator",
    "EquilibriumPair", "check_admissible", "is_equilibrium", "step",
    "Obstacle", "Workspace", "obstacle_clearance",
    "CostWeights", "FhocpSolution", "FhocpSpec", "Horizons", "J_HAT_INF",
    "bound_update", "build_problem", "contingency_cost", "constraint_residual",
    "min_contingency_horizon", "shift_candidate",
    "ActiveSafeSet", "Ball", "fos_update", "freeze_indicators", "gamma_radius",
    "generate_safe_set", "overlap_strict", "radius_upper_bound",
    "reconstruction_ball",
    "AgentConfig", "PnpEvent", "ScenarioConfig", "ScenarioError",
    "load_scenario", "preset", "random_scenario",
    "RunMetrics", "SimulationError", "StepRecord", "WorldState",
    "check_collision_free", "closed_loop_step", "init_world",
    "oracle_bruteforce", "run_scenario",
    "SolveReport", "SolverOptions", "solve_fhocp", "solve_with_fallback",
    "__version__",
]
