"""Discrete-time agent models: planar double integrator, admissibility, equilibria.

All closed-loop and predicted motion in this package goes through `step` /
`step_vec`, so the simulator and the planner integrate the dynamics with the
exact same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Tolerance for admissibility checks on closed-loop states. Solver feasibility
# tolerance dominates; this only guards against genuine violations.
TOL_ADM = 1e-9


@dataclass
class AgentParams:
    """Physical parameters of one agent (SI units)."""

    r: float = 0.2          # body radius [m]
    v_max: float = 3.0      # speed limit [m/s]
    a_max: float = 3.5      # acceleration limit [m/s^2]
    a_min_mag: float = 3.5  # braking-acceleration magnitude [m/s^2]
    Ts: float = 0.1         # sampling time [s]

    def __post_init__(self):
        for name in ("r", "v_max", "a_max", "a_min_mag", "Ts"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"AgentParams.{name} must be finite, got {value}")
        if self.r <= 0 or self.a_max <= 0 or self.a_min_mag <= 0 or self.Ts <= 0:
            raise ValueError("AgentParams fields must be strictly positive")
        if self.v_max < 0:
            raise ValueError("v_max must be nonnegative")


@dataclass
class AgentState:
    """Position-velocity state of one planar agent."""

    p: np.ndarray  # position (2,)
    v: np.ndarray  # velocity (2,)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(2)
        self.v = np.asarray(self.v, dtype=float).reshape(2)

    def as_vec(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vec(cls, x: np.ndarray) -> "AgentState":
        x = np.asarray(x, dtype=float).reshape(4)
        return cls(p=x[:2].copy(), v=x[2:].copy())

    def copy(self) -> "AgentState":
        return AgentState(p=self.p.copy(), v=self.v.copy())


@dataclass
class ControlInput:
    """Acceleration input of one agent."""

    u: np.ndarray  # (2,)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(2)


@dataclass
class EquilibriumPair:
    """Fixed point of the dynamics; for the double integrator v = 0, u = 0."""

    x_bar: AgentState
    u_bar: ControlInput


class Admissibility(NamedTuple):
    state_ok: bool
    input_ok: bool


def step_vec(x: np.ndarray, u: np.ndarray, Ts: float) -> np.ndarray:
    """Advance state vectors [px, py, vx, vy] one step under input [ax, ay].

    Accepts stacked rows; the leading dimensions broadcast.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.empty_like(x, dtype=float)
    out[..., :2] = x[..., :2] + Ts * x[..., 2:] + 0.5 * Ts * Ts * u
    out[..., 2:] = x[..., 2:] + Ts * u
    return out


def step(x: AgentState, u: ControlInput, params: AgentParams) -> AgentState:
    """One discrete-time step of the planar double integrator."""
    if not (np.all(np.isfinite(x.p)) and np.all(np.isfinite(x.v)) and np.all(np.isfinite(u.u))):
        raise ValueError("step: non-finite state or input component")
    nxt = step_vec(x.as_vec(), u.u, params.Ts)
    return AgentState.from_vec(nxt)


def check_admissible(x: AgentState, u: ControlInput, params: AgentParams,
                     tol: float = TOL_ADM) -> Admissibility:
    """Check the speed and acceleration norm bounds (boundary inclusive)."""
    state_ok = float(np.linalg.norm(x.v)) <= params.v_max + tol
    input_ok = float(np.linalg.norm(u.u)) <= params.a_max + tol
    return Admissibility(state_ok=state_ok, input_ok=input_ok)


def is_equilibrium(x: AgentState, u: ControlInput, params: AgentParams,
                   tol: float = 1e-12) -> bool:
    """True iff (x, u) is a fixed point of the dynamics up to `tol`."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    nxt = step(x, u, params)
    return float(np.linalg.norm(nxt.as_vec() - x.as_vec())) <= tol


def translate(x: AgentState, delta: np.ndarray) -> AgentState:
    """Shift the position by `delta`, leaving the velocity unchanged."""
    delta = np.asarray(delta, dtype=float).reshape(2)
    return AgentState(p=x.p + delta, v=x.v.copy())


class DoubleIntegrator:
    """Thin model wrapper exposing the matrices used by the planner.

    Other agent models can implement the same surface (step, admissibility,
    equilibrium test, safe-set generator hooks); only this one ships.
    """

    def __init__(self, params: AgentParams):
        self.params = params
        Ts = params.Ts
        self.A = np.block([[np.eye(2), Ts * np.eye(2)],
                           [np.zeros((2, 2)), np.eye(2)]])
        self.B = np.vstack([0.5 * Ts * Ts * np.eye(2), Ts * np.eye(2)])

    def step(self, x: AgentState, u: ControlInput) -> AgentState:
        return step(x, u, self.params)

    def check_admissible(self, x: AgentState, u: ControlInput) -> Admissibility:
        return check_admissible(x, u, self.params)

    def is_equilibrium(self, x: AgentState, u: ControlInput, tol: float = 1e-12) -> bool:
        return is_equilibrium(x, u, self.params, tol)
