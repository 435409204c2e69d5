"""Static environment: circular obstacles and rectangular workspace bounds.

The scalar clearance h(p) is nonnegative exactly when the agent body at p
intersects no obstacle and stays inside the workspace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

# Returned when no obstacle constrains the position (constraint inactive).
CLEARANCE_SENTINEL = 1e9

Workspace = Tuple[float, float, float, float]  # (xmin, xmax, ymin, ymax)


@dataclass
class Obstacle:
    """Static circular obstacle."""

    center: np.ndarray  # (2,)
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.radius = float(self.radius)
        if self.radius < 0:
            raise ValueError("obstacle radius must be nonnegative")


def obstacle_clearance(p: np.ndarray, r: float, obstacles: Sequence[Obstacle]) -> float:
    """Signed distance of the body disc of radius r at p to the obstacle set."""
    if not obstacles:
        return CLEARANCE_SENTINEL
    p = np.asarray(p, dtype=float).reshape(2)
    return min(float(np.linalg.norm(p - o.center)) - o.radius - r for o in obstacles)


def workspace_clearance(p: np.ndarray, r: float, workspace: Optional[Workspace]) -> float:
    """Smallest of the four half-plane clearances of the body disc at p."""
    if workspace is None:
        return CLEARANCE_SENTINEL
    xmin, xmax, ymin, ymax = workspace
    p = np.asarray(p, dtype=float).reshape(2)
    return min(p[0] - (xmin + r), (xmax - r) - p[0],
               p[1] - (ymin + r), (ymax - r) - p[1])


def clearance(p: np.ndarray, r: float, obstacles: Sequence[Obstacle],
              workspace: Optional[Workspace]) -> float:
    """Combined obstacle-and-workspace clearance used in the planner."""
    return min(obstacle_clearance(p, r, obstacles),
               workspace_clearance(p, r, workspace))
