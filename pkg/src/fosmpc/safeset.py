"""Local safe sets: stopping-radius generator, strict overlap tests, and the
freeze-or-shift update that keeps the active sets pairwise disjoint.

Every safe set is a closed planar ball. Overlap is tested strictly
(tangent balls count as disjoint) and that single predicate is used
everywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .dynamics import AgentParams, AgentState


@dataclass
class Ball:
    """Closed ball in position space."""

    c: np.ndarray  # center (2,)
    R: float       # radius >= 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(2)
        self.R = float(self.R)
        if not (np.all(np.isfinite(self.c)) and np.isfinite(self.R)):
            raise ValueError("Ball entries must be finite")
        if self.R < 0:
            raise ValueError("Ball radius must be nonnegative")

    def contains_point(self, p: np.ndarray, margin: float = 0.0) -> bool:
        return float(np.linalg.norm(np.asarray(p, dtype=float) - self.c)) <= self.R - margin

    def copy(self) -> "Ball":
        return Ball(c=self.c.copy(), R=self.R)


@dataclass
class ActiveSafeSet:
    """Active ball of one agent plus the one-step memory the update rule needs."""

    active: Ball
    frozen: bool          # freeze indicator at the last update
    prev: Ball            # active ball one step earlier

    def copy(self) -> "ActiveSafeSet":
        return ActiveSafeSet(active=self.active.copy(), frozen=self.frozen,
                             prev=self.prev.copy())


def stopping_radius(speed: float, probe_mag: float, params: AgentParams) -> float:
    """Radius covering one step at `probe_mag` followed by worst-case braking.

    `speed` is the current speed; the probe is taken aligned with the velocity,
    which maximizes the post-step speed and hence the braking distance.
    """
    Ts = params.Ts
    post = speed + Ts * probe_mag
    return 0.5 * Ts * Ts * probe_mag + Ts * speed + post * post / (2.0 * params.a_min_mag) + params.r


def gamma_radius(speed, params: AgentParams):
    """Canonical generator radius: worst-case admissible first input.

    Accepts scalars or arrays of speeds.
    """
    Ts = params.Ts
    s = np.asarray(speed, dtype=float)
    post = s + Ts * params.a_max
    out = 0.5 * Ts * Ts * params.a_max + Ts * s + post * post / (2.0 * params.a_min_mag) + params.r
    if out.ndim == 0:
        return float(out)
    return out


def gamma_radius_slope(speed, params: AgentParams):
    """Derivative of `gamma_radius` with respect to the speed."""
    s = np.asarray(speed, dtype=float)
    out = params.Ts + (s + params.Ts * params.a_max) / params.a_min_mag
    if out.ndim == 0:
        return float(out)
    return out


def generate_safe_set(x: AgentState, params: AgentParams,
                      u_probe: Optional[np.ndarray] = None) -> Ball:
    """Safe ball centered at the agent position.

    With `u_probe=None` the canonical state-only generator is used: the probe
    magnitude is `a_max`, aligned with the velocity (supremum over admissible
    first inputs). Passing an explicit probe gives the tighter input-dependent
    radius.
    """
    if u_probe is None:
        R = gamma_radius(float(np.linalg.norm(x.v)), params)
    else:
        u = np.asarray(u_probe, dtype=float).reshape(2)
        Ts = params.Ts
        post = x.v + Ts * u
        R = (0.5 * Ts * Ts * float(np.linalg.norm(u))
             + Ts * float(np.linalg.norm(x.v))
             + float(np.dot(post, post)) / (2.0 * params.a_min_mag)
             + params.r)
    return Ball(c=x.p.copy(), R=R)


def radius_upper_bound(params: AgentParams) -> float:
    """Supremum of the generator radius over admissible states and probes."""
    return gamma_radius(params.v_max, params)


def overlap_strict(a: Ball, b: Ball) -> bool:
    """Strict ball overlap: tangency does NOT count as overlap."""
    return float(np.linalg.norm(a.c - b.c)) < a.R + b.R


def freeze_indicators(candidates: Sequence[Ball], actives: Sequence[Ball]) -> List[bool]:
    """Freeze flags from one shared snapshot of candidate and active sets.

    Agent i freezes iff its candidate strictly overlaps another agent's
    candidate or another agent's currently active set. Order-independent.
    """
    if len(candidates) != len(actives):
        raise ValueError("candidates and actives must index the same agent set")
    n = len(candidates)
    chi = [False] * n
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            if overlap_strict(candidates[i], candidates[j]) or \
               overlap_strict(candidates[i], actives[j]):
                chi[i] = True
                break
    return chi


def fos_update(candidates: Sequence[Ball], actives: Sequence[Ball],
               chi: Sequence[bool]) -> List[Ball]:
    """Freeze-or-shift: keep the previous active set iff the agent froze."""
    if not (len(candidates) == len(actives) == len(chi)):
        raise ValueError("freeze-or-shift inputs must have equal lengths")
    return [actives[i].copy() if chi[i] else candidates[i].copy()
            for i in range(len(chi))]


def reconstruction_ball(p: np.ndarray, R_max: float, r: float) -> Ball:
    """History-free outer approximation of a possibly frozen safe set."""
    if r <= 0:
        raise ValueError("body radius must be positive")
    if R_max < r:
        raise ValueError("R_max must be at least the body radius")
    return Ball(c=np.asarray(p, dtype=float).reshape(2).copy(), R=2.0 * R_max - r)
