"""Kinematic states, trajectories and actor-centric coordinate frames.

Everything downstream (scene simulation, rasterization, losses, metrics)
works in the actor-centric frame: origin at the actor's bounding-box
centroid, x pointing forward along the heading, y pointing left.  All
math here is 64-bit and purely functional; the types are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class DegenerateTrajectory(ValueError):
    """Raised when an endpoint sits too close to the origin for a bearing."""


def normalize_angle(a):
    """Wrap an angle (scalar or array, radians) into (-pi, pi]."""
    r = np.mod(np.asarray(a, dtype=float) + math.pi, TWO_PI) - math.pi
    r = np.where(r == -math.pi, math.pi, r)
    return float(r) if np.isscalar(a) or np.ndim(a) == 0 else r


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=float)


@dataclass(frozen=True)
class ActorState:
    """Tracker output for one actor at one tick.

    Position is the bounding-box centroid in the global frame.  Velocity
    and acceleration are scalars along the heading; lateral velocity is
    not modeled.
    """

    position: np.ndarray
    velocity: float
    acceleration: float
    heading: float
    heading_change_rate: float
    bbox_length: float = 4.5
    bbox_width: float = 2.0
    actor_id: int = 0
    tick: int = 0

    def __post_init__(self):
        if self.bbox_length <= 0 or self.bbox_width <= 0:
            raise ValueError("bounding box dimensions must be positive")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def frame(self) -> "ActorFrame":
        return ActorFrame(origin=self.position, rotation=self.heading)


@dataclass(frozen=True)
class ActorFrame:
    """Rigid 2-D frame: ``origin`` in global coordinates, ``rotation`` CCW."""

    origin: np.ndarray
    rotation: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    def to_local(self, points_global) -> np.ndarray:
        """Map global points (..., 2) into this frame.

        The translation is applied before the rotation so that shifting
        the whole scene and the frame together cancels exactly in
        floating point.
        """
        p = np.asarray(points_global, dtype=float)
        return (p - self.origin) @ rotation_matrix(self.rotation)

    def to_global(self, points_local) -> np.ndarray:
        """Inverse of :meth:`to_local`."""
        p = np.asarray(points_local, dtype=float)
        return p @ rotation_matrix(self.rotation).T + self.origin


def to_actor_frame(state: ActorState, point_global) -> np.ndarray:
    """Express a global point in the actor-centric frame of ``state``."""
    return state.frame.to_local(point_global)


def from_actor_frame(state: ActorState, point_local) -> np.ndarray:
    return state.frame.to_global(point_local)


@dataclass(frozen=True)
class Trajectory:
    """H future waypoints in an actor-centric frame, one every ``dt`` seconds."""

    points: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory points must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def horizon(self) -> int:
        return len(self.points)

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]


def trajectory_endpoint_bearing(t: Trajectory) -> float:
    """Bearing (radians) of the final waypoint as seen from the actor origin."""
    x, y = t.endpoint
    if math.hypot(x, y) < 1e-6:
        raise DegenerateTrajectory("endpoint within 1e-6 m of the origin")
    return math.atan2(y, x)


def classify_maneuver(t: Trajectory, straight_threshold: float = math.radians(10.0)) -> str:
    """Label a trajectory left/straight/right by its endpoint bearing.

    Degenerate trajectories (endpoint at the origin) count as straight.
    """
    try:
        bearing = trajectory_endpoint_bearing(t)
    except DegenerateTrajectory:
        return "straight"
    if abs(bearing) < straight_threshold:
        return "straight"
    return "left" if bearing > 0 else "right"


@dataclass(frozen=True)
class MultimodalPrediction:
    """M candidate trajectories with probabilities summing to one.

    ``covariances``, when present, holds one 2x2 SPD matrix per mode and
    per horizon step, shape (M, H, 2, 2).
    """

    modes: tuple
    probabilities: np.ndarray
    covariances: np.ndarray | None = field(default=None)

    def __post_init__(self):
        modes = tuple(self.modes)
        if len(modes) < 1:
            raise ValueError("need at least one mode")
        probs = np.asarray(self.probabilities, dtype=float)
        if probs.shape != (len(modes),):
            raise ValueError("one probability per mode required")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "probabilities", probs)
        if self.covariances is not None:
            cov = np.asarray(self.covariances, dtype=float)
            H = modes[0].horizon
            if cov.shape != (len(modes), H, 2, 2):
                raise ValueError("covariances must have shape (M, H, 2, 2)")
            det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
            if np.any(det <= 0):
                raise ValueError("covariances must be positive definite")
            object.__setattr__(self, "covariances", cov)

    @property
    def num_modes(self) -> int:
        return len(self.modes)
