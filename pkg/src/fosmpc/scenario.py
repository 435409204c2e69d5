"""Scenario configuration: JSON loading, validation, random scenario
generation, and the bundled presets.

A scenario fixes the agent fleet (ids, physical parameters, start and
reference states), the static environment, horizons, weights, solver
options, scheduled join/leave events, and the ablation switches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .dynamics import AgentParams
from .environment import Obstacle, Workspace
from .ocp import CostWeights, Horizons, min_contingency_horizon
from .safeset import Ball, gamma_radius, overlap_strict, radius_upper_bound
from .solver import SolverOptions


class ScenarioError(ValueError):
    """Raised when a scenario file or config fails validation."""


@dataclass
class AgentConfig:
    """Static description of one agent in a scenario."""

    agent_id: int
    p0: np.ndarray
    v0: np.ndarray
    p_ref: np.ndarray
    params: AgentParams = field(default_factory=AgentParams)

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float).reshape(2)
        self.v0 = np.asarray(self.v0, dtype=float).reshape(2)
        self.p_ref = np.asarray(self.p_ref, dtype=float).reshape(2)


@dataclass
class PnpEvent:
    """Scheduled join or leave at a given step index."""

    t: int
    kind: str                      # "join" or "leave"
    agent: Optional[AgentConfig] = None   # join only
    agent_id: Optional[int] = None        # leave only

    def __post_init__(self):
        if self.kind not in ("join", "leave"):
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        if self.kind == "join" and self.agent is None:
            raise ScenarioError("join event requires an agent description")
        if self.kind == "leave" and self.agent_id is None:
            raise ScenarioError("leave event requires an agent id")


@dataclass
class ScenarioConfig:
    """Complete, validated description of one closed-loop run."""

    agents: List[AgentConfig]
    obstacles: List[Obstacle] = field(default_factory=list)
    workspace: Optional[Workspace] = None
    horizons: Horizons = field(default_factory=Horizons)
    weights: CostWeights = field(default_factory=CostWeights)
    solver: SolverOptions = field(default_factory=SolverOptions)
    seed: int = 0
    max_steps: int = 300
    pnp_events: List[PnpEvent] = field(default_factory=list)
    disable_tail_constraint: bool = False
    disable_fos: bool = False
    disable_lyap_constraint: bool = False
    eps_conv: float = 0.05     # position tolerance for convergence [m]
    K_stable: int = 10         # steps the equilibrium must hold to terminate
    name: str = "scenario"

    def validate(self) -> None:
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise ScenarioError("duplicate agent ids")
        for a in self.agents:
            if float(np.linalg.norm(a.v0)) > a.params.v_max + 1e-12:
                raise ScenarioError(f"agent {a.agent_id}: initial speed exceeds v_max")
            if self.horizons.N_c < min_contingency_horizon(a.params):
                raise ScenarioError(
                    f"backup horizon {self.horizons.N_c} is below the minimum "
                    f"{min_contingency_horizon(a.params)} for agent {a.agent_id}")
        balls = [Ball(a.p0, gamma_radius(float(np.linalg.norm(a.v0)), a.params))
                 for a in self.agents]
        for i in range(len(balls)):
            for j in range(i + 1, len(balls)):
                if overlap_strict(balls[i], balls[j]):
                    raise ScenarioError(
                        f"initial safe sets of agents {ids[i]} and {ids[j]} overlap")
        for ev in self.pnp_events:
            if not (0 <= ev.t <= self.max_steps):
                raise ScenarioError(f"event time {ev.t} outside [0, {self.max_steps}]")
            if ev.kind == "leave" and ev.agent_id not in ids and not any(
                    e.kind == "join" and e.agent is not None
                    and e.agent.agent_id == ev.agent_id for e in self.pnp_events):
                raise ScenarioError(f"leave event names unknown agent {ev.agent_id}")


def _params_from_dict(d: dict) -> AgentParams:
    allowed = {"r", "v_max", "a_max", "a_min_mag", "Ts"}
    bad = set(d) - allowed
    if bad:
        raise ScenarioError(f"unknown params fields: {sorted(bad)}")
    return AgentParams(**d)


def _agent_from_dict(d: dict) -> AgentConfig:
    try:
        return AgentConfig(
            agent_id=int(d["id"]),
            p0=d["p0"],
            v0=d.get("v0", [0.0, 0.0]),
            p_ref=d["p_ref"],
            params=_params_from_dict(d.get("params", {})),
        )
    except KeyError as exc:
        raise ScenarioError(f"agent entry missing field {exc.args[0]!r}") from None


def _weights_from_dict(d: dict) -> CostWeights:
    allowed = {"Q_p", "Q_v", "R_u", "P_s", "Q_s", "R_s", "gamma", "rho_nom"}
    bad = set(d) - allowed
    if bad:
        raise ScenarioError(f"unknown weights fields: {sorted(bad)}")
    return CostWeights(**d)


def scenario_from_dict(data: dict, name: str = "scenario") -> ScenarioConfig:
    """Build and validate a config from parsed JSON data."""
    if "agents" not in data or not isinstance(data["agents"], list):
        raise ScenarioError("scenario must define an 'agents' list")
    agents = [_agent_from_dict(a) for a in data["agents"]]
    obstacles = [Obstacle(center=o["center"], radius=o["radius"])
                 for o in data.get("obstacles", [])]
    workspace = data.get("workspace")
    if workspace is not None:
        workspace = tuple(float(v) for v in workspace)
        if len(workspace) != 4 or workspace[0] >= workspace[1] or workspace[2] >= workspace[3]:
            raise ScenarioError("workspace must be [xmin, xmax, ymin, ymax] with min < max")
    horizons = Horizons(**data.get("horizons", {}))
    weights = _weights_from_dict(data.get("weights", {}))
    solver = SolverOptions(**data.get("solver", {}))
    events = []
    for ev in data.get("pnp_events", []):
        kind = ev.get("kind")
        if kind == "join":
            events.append(PnpEvent(t=int(ev["t"]), kind="join",
                                   agent=_agent_from_dict(ev["agent"])))
        elif kind == "leave":
            events.append(PnpEvent(t=int(ev["t"]), kind="leave",
                                   agent_id=int(ev["id"])))
        else:
            raise ScenarioError(f"unknown event kind {kind!r}")
    cfg = ScenarioConfig(
        agents=agents,
        obstacles=obstacles,
        workspace=workspace,
        horizons=horizons,
        weights=weights,
        solver=solver,
        seed=int(data.get("seed", 0)),
        max_steps=int(data.get("max_steps", 300)),
        pnp_events=events,
        disable_tail_constraint=bool(data.get("disable_tail_constraint", False)),
        disable_fos=bool(data.get("disable_fos", False)),
        disable_lyap_constraint=bool(data.get("disable_lyap_constraint", False)),
        eps_conv=float(data.get("eps_conv", 0.05)),
        K_stable=int(data.get("K_stable", 10)),
        name=name,
    )
    cfg.validate()
    return cfg


def load_scenario(path: str) -> ScenarioConfig:
    """Load and validate a JSON scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON in {path}: {exc}") from None
    return scenario_from_dict(data, name=str(path))


def _sample_separated(rng: np.random.Generator, n: int, lo: np.ndarray,
                      hi: np.ndarray, min_sep: float,
                      max_tries: int = 20000) -> np.ndarray:
    """Rejection-sample n points in a box with pairwise minimum separation."""
    pts = np.empty((n, 2))
    count = 0
    for _ in range(max_tries):
        q = lo + rng.random(2) * (hi - lo)
        if count == 0 or np.min(np.linalg.norm(pts[:count] - q, axis=1)) >= min_sep:
            pts[count] = q
            count += 1
            if count == n:
                return pts
    raise ScenarioError(
        f"could not place {n} points with separation {min_sep:.3f} in the workspace")


def random_scenario(M: int, seed: int, params: Optional[AgentParams] = None,
                    max_steps: int = 300, name: Optional[str] = None) -> ScenarioConfig:
    """Random fleet: starts and references sampled in a square workspace with
    pairwise separation twice the largest safe radius, so the initial sets are
    disjoint by construction for any admissible initial speeds."""
    params = params or AgentParams()
    R_max = radius_upper_bound(params)
    min_sep = 2.0 * R_max
    side = max(10.0, min_sep * math.sqrt(3.0 * M))
    rng = np.random.default_rng(seed)
    margin = R_max
    lo = np.array([margin, margin])
    hi = np.array([side - margin, side - margin])
    starts = _sample_separated(rng, M, lo, hi, min_sep)
    refs = _sample_separated(rng, M, lo, hi, min_sep)
    agents = [AgentConfig(agent_id=i, p0=starts[i], v0=np.zeros(2), p_ref=refs[i],
                          params=AgentParams(**vars(params)))
              for i in range(M)]
    cfg = ScenarioConfig(agents=agents, workspace=(0.0, side, 0.0, side),
                         seed=seed, max_steps=max_steps,
                         name=name or f"random-M{M}-seed{seed}")
    cfg.validate()
    return cfg


def _bottleneck() -> ScenarioConfig:
    """Four agents swapping sides through a passage between two obstacles."""
    obstacles = [Obstacle(center=[7.0, 1.4], radius=2.2),
                 Obstacle(center=[7.0, 8.6], radius=2.2)]
    agents = [
        AgentConfig(0, p0=[1.5, 3.8], v0=[0, 0], p_ref=[12.5, 6.2]),
        AgentConfig(1, p0=[1.5, 6.2], v0=[0, 0], p_ref=[12.5, 3.8]),
        AgentConfig(2, p0=[12.5, 3.8], v0=[0, 0], p_ref=[1.5, 6.2]),
        AgentConfig(3, p0=[12.5, 6.2], v0=[0, 0], p_ref=[1.5, 3.8]),
    ]
    return ScenarioConfig(agents=agents, obstacles=obstacles,
                          workspace=(0.0, 14.0, 0.0, 10.0), seed=0,
                          name="bottleneck")


def _pnp_preset() -> ScenarioConfig:
    """Two resident agents; three agents join online and one later leaves."""
    agents = [
        AgentConfig(0, p0=[2.0, 2.0], v0=[0, 0], p_ref=[10.0, 10.0]),
        AgentConfig(1, p0=[10.0, 2.0], v0=[0, 0], p_ref=[2.0, 10.0]),
    ]
    events = [
        PnpEvent(t=15, kind="join",
                 agent=AgentConfig(2, p0=[2.0, 10.0], v0=[0, 0], p_ref=[10.0, 2.0])),
        PnpEvent(t=30, kind="join",
                 agent=AgentConfig(3, p0=[10.0, 10.0], v0=[0, 0], p_ref=[2.0, 2.0])),
        PnpEvent(t=45, kind="join",
                 agent=AgentConfig(4, p0=[6.0, 1.0], v0=[0, 0], p_ref=[6.0, 11.0])),
        PnpEvent(t=80, kind="leave", agent_id=2),
    ]
    return ScenarioConfig(agents=agents, workspace=(0.0, 12.0, 0.0, 12.0),
                          pnp_events=events, seed=0, name="pnp")


def crossing_scenario(disable_fos: bool = False) -> ScenarioConfig:
    """Three agents converging through a common midpoint; the stress case for
    the set-update rule."""
    c = np.array([6.0, 6.0])
    agents = []
    for i, ang in enumerate((0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)):
        d = 4.5 * np.array([math.cos(ang), math.sin(ang)])
        agents.append(AgentConfig(i, p0=c + d, v0=np.zeros(2), p_ref=c - d))
    return ScenarioConfig(agents=agents, workspace=(0.0, 12.0, 0.0, 12.0),
                          disable_fos=disable_fos, seed=0,
                          name="crossing" + ("-nofos" if disable_fos else ""))


def deceleration_scenario(disable_tail: bool = False) -> ScenarioConfig:
    """Single agent moving away from its reference; the stress case for the
    suffix-containment constraint.

    The backup plan must overshoot, stop, and return, so without the suffix
    requirement its optimum parks the terminal equilibrium far behind the
    turning point — and the shifted plan then sticks out of the safe set
    generated at the successor state."""
    agents = [AgentConfig(0, p0=[6.0, 5.0], v0=[2.0, 0.0], p_ref=[3.0, 5.0])]
    return ScenarioConfig(agents=agents, workspace=(0.0, 12.0, 0.0, 10.0),
                          disable_tail_constraint=disable_tail, seed=0,
                          name="deceleration" + ("-notail" if disable_tail else ""))


PRESET_NAMES = ("density-5", "density-10", "density-20", "bottleneck", "pnp")


def preset(name: str, seed: int = 0) -> ScenarioConfig:
    """Bundled scenario by name."""
    if name == "density-5":
        return random_scenario(5, seed=seed, name=name)
    if name == "density-10":
        return random_scenario(10, seed=seed, name=name)
    if name == "density-20":
        return random_scenario(20, seed=seed, name=name)
    if name == "bottleneck":
        cfg = _bottleneck()
    elif name == "pnp":
        cfg = _pnp_preset()
    else:
        raise ScenarioError(f"unknown preset {name!r}")
    cfg.seed = seed
    cfg.validate()
    return cfg
