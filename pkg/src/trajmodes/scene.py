"""Synthetic road network and scripted actor rollouts.

The world model is deliberately small: lanes are polylines with a
width, connectivity says which lane may follow which, and actors drive
along lanes at a noisy speed, choosing a successor at random shortly
before a branch point.  Because the branch draw happens with a fixed
mix of weights and nothing in the actor's behavior betrays it
beforehand, datasets built from these rollouts contain genuinely
irreducible multimodality with known mode frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ActorState, normalize_angle


class InvalidGeometry(ValueError):
    pass


class OffMap(RuntimeError):
    """Actor ran past the end of a lane with no successor."""


@dataclass(frozen=True)
class LaneGeometry:
    lane_id: int
    centerline: np.ndarray
    width: float

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise InvalidGeometry("centerline needs at least 2 points")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0.0):
            raise InvalidGeometry("consecutive centerline points must differ")
        if self.width <= 0:
            raise InvalidGeometry("lane width must be positive")
        object.__setattr__(self, "centerline", pts)

    @property
    def seg_vectors(self) -> np.ndarray:
        return np.diff(self.centerline, axis=0)

    @property
    def seg_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.seg_vectors, axis=1)

    @property
    def length(self) -> float:
        return float(self.seg_lengths.sum())

    def point_at(self, s: float) -> np.ndarray:
        """Interpolate the centerline at arclength ``s`` (clamped)."""
        cum = np.concatenate([[0.0], np.cumsum(self.seg_lengths)])
        s = min(max(s, 0.0), cum[-1])
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(cum) - 2)
        t = (s - cum[i]) / self.seg_lengths[i]
        return self.centerline[i] + t * self.seg_vectors[i]

    def heading_at(self, s: float) -> float:
        cum = np.concatenate([[0.0], np.cumsum(self.seg_lengths)])
        s = min(max(s, 0.0), cum[-1])
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(cum) - 2)
        vx, vy = self.seg_vectors[i]
        return math.atan2(vy, vx)


@dataclass(frozen=True)
class ActorPolicy:
    """Scripted behavior of one actor.

    ``branch_weights`` maps successor lane ids to probabilities for the
    choice made ``decision_distance`` meters before a branch point.
    ``speed_targets`` optionally re-draws the nominal speed (with the
    given weights) once the actor has traveled ``speed_change_after``
    meters, ramping at ``accel_limit``; this creates fast/slow futures
    that are invisible at prediction time.  ``speed_sigma`` is the
    stationary standard deviation of an AR(1) jitter around the nominal
    speed, clipped at three sigmas.
    """

    speed: float = 10.0
    speed_sigma: float = 0.0
    speed_reversion: float = 0.5
    branch_weights: dict | None = None
    decision_distance: float = 10.0
    speed_targets: tuple = ()
    speed_change_after: float = math.inf
    accel_limit: float = 1.5


@dataclass(frozen=True)
class ActorSpec:
    actor_id: int
    lane_id: int
    start_offset: float
    policy: ActorPolicy = field(default_factory=ActorPolicy)
    bbox_length: float = 4.5
    bbox_width: float = 2.0


@dataclass(frozen=True)
class Scenario:
    lanes: dict
    connectivity: dict
    actors: tuple = ()

    def __post_init__(self):
        for lane_id, succs in self.connectivity.items():
            if lane_id not in self.lanes:
                raise InvalidGeometry(f"connectivity for unknown lane {lane_id}")
            for s in succs:
                if s not in self.lanes:
                    raise InvalidGeometry(f"unknown successor lane {s}")
        for spec in self.actors:
            w = spec.policy.branch_weights
            if w is not None and abs(sum(w.values()) - 1.0) > 1e-9:
                raise InvalidGeometry("branch weights must sum to 1")
            mix = spec.policy.speed_targets
            if mix and abs(sum(p for _, p in mix) - 1.0) > 1e-9:
                raise InvalidGeometry("speed target weights must sum to 1")

    def with_actors(self, specs) -> "Scenario":
        return replace(self, actors=tuple(specs))

    def successors(self, lane_id: int) -> tuple:
        return tuple(self.connectivity.get(lane_id, ()))


# ---------------------------------------------------------------------------
# Map builders
# ---------------------------------------------------------------------------

APPROACH, STRAIGHT, RIGHT_TURN, RIGHT_EXIT, LEFT_TURN, LEFT_EXIT = range(6)


def _arc(radius: float, sign: float, step: float = 0.5) -> np.ndarray:
    """Quarter-circle connector leaving the origin along +x, turning
    toward -y (sign=-1, right) or +y (sign=+1, left)."""
    n = max(int(math.ceil(radius * math.pi / 2.0 / step)), 4)
    theta = np.linspace(0.0, math.pi / 2.0, n + 1)
    return np.stack([radius * np.sin(theta),
                     sign * radius * (1.0 - np.cos(theta))], axis=1)


def build_t_intersection(arm_length: float, lane_width: float,
                         turn_radius: float = 8.0,
                         include_left: bool = False) -> Scenario:
    """One approach lane feeding a straight lane and a right-turn
    connector (optionally a mirrored left turn)."""
    if arm_length <= 0 or lane_width <= 0 or turn_radius <= 0:
        raise InvalidGeometry("dimensions must be positive")
    lanes = {
        APPROACH: LaneGeometry(APPROACH, [(-arm_length, 0.0), (0.0, 0.0)], lane_width),
        STRAIGHT: LaneGeometry(STRAIGHT, [(0.0, 0.0), (arm_length, 0.0)], lane_width),
        RIGHT_TURN: LaneGeometry(RIGHT_TURN, _arc(turn_radius, -1.0), lane_width),
        RIGHT_EXIT: LaneGeometry(
            RIGHT_EXIT,
            [(turn_radius, -turn_radius), (turn_radius, -turn_radius - arm_length)],
            lane_width),
    }
    connectivity = {
        APPROACH: [STRAIGHT, RIGHT_TURN],
        STRAIGHT: [],
        RIGHT_TURN: [RIGHT_EXIT],
        RIGHT_EXIT: [],
    }
    if include_left:
        lanes[LEFT_TURN] = LaneGeometry(LEFT_TURN, _arc(turn_radius, 1.0), lane_width)
        lanes[LEFT_EXIT] = LaneGeometry(
            LEFT_EXIT,
            [(turn_radius, turn_radius), (turn_radius, turn_radius + arm_length)],
            lane_width)
        connectivity[APPROACH] = [STRAIGHT, RIGHT_TURN, LEFT_TURN]
        connectivity[LEFT_TURN] = [LEFT_EXIT]
        connectivity[LEFT_EXIT] = []
    return Scenario(lanes=lanes, connectivity=connectivity)


def build_straight_road(length: float, lane_width: float) -> Scenario:
    if length <= 0 or lane_width <= 0:
        raise InvalidGeometry("dimensions must be positive")
    lane = LaneGeometry(0, [(0.0, 0.0), (length, 0.0)], lane_width)
    return Scenario(lanes={0: lane}, connectivity={0: []})


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rollout:
    actor_id: int
    states: tuple
    lane_per_tick: tuple
    route: tuple
    route_is_choice: tuple
    dt: float

    def __len__(self):
        return len(self.states)

    def followed_lane(self, tick: int) -> int:
        """Lane entered at the next branching point after ``tick`` (the
        current lane when no choice lies ahead); feeds the lane-following
        raster variant."""
        lane_now = self.lane_per_tick[tick]
        start = self.route.index(lane_now)
        for i in range(start, len(self.route) - 1):
            if self.route_is_choice[i]:
                return self.route[i + 1]
        return lane_now


def _weighted_choice(rng: np.random.Generator, options, weights: dict | None):
    if weights is None:
        probs = np.full(len(options), 1.0 / len(options))
    else:
        probs = np.array([weights.get(o, 0.0) for o in options], dtype=float)
        total = probs.sum()
        if total <= 0:
            probs = np.full(len(options), 1.0 / len(options))
        else:
            probs = probs / total
    return options[int(rng.choice(len(options), p=probs))]


def simulate_actor(scenario: Scenario, spec: ActorSpec, seed: int,
                   num_ticks: int, dt: float = 0.1) -> Rollout:
    """Roll one scripted actor forward; deterministic given the seed."""
    if spec.lane_id not in scenario.lanes:
        raise OffMap(f"actor starts on unknown lane {spec.lane_id}")
    rng = np.random.default_rng((seed, spec.actor_id))
    pol = spec.policy
    lane = scenario.lanes[spec.lane_id]
    s = float(spec.start_offset)
    nominal = pol.speed
    target = None
    dev = 0.0
    v = nominal
    traveled = 0.0
    branch_next = None
    rho = math.exp(-pol.speed_reversion * dt)
    innovation = pol.speed_sigma * math.sqrt(max(1.0 - rho * rho, 0.0))

    states, lane_ids, route, choices = [], [], [lane.lane_id], []
    prev_heading = lane.heading_at(s)
    prev_v = v
    for tick in range(num_ticks):
        pos = lane.point_at(s)
        heading = lane.heading_at(s)
        hcr = normalize_angle(heading - prev_heading) / dt if tick else 0.0
        acc = (v - prev_v) / dt if tick else 0.0
        states.append(ActorState(
            position=pos, velocity=v, acceleration=acc, heading=heading,
            heading_change_rate=hcr, bbox_length=spec.bbox_length,
            bbox_width=spec.bbox_width, actor_id=spec.actor_id, tick=tick))
        lane_ids.append(lane.lane_id)
        prev_heading, prev_v = heading, v

        # draw the speed target once the actor has covered the trigger distance
        if pol.speed_targets and target is None and traveled >= pol.speed_change_after:
            target = _weighted_choice(
                rng, [spd for spd, _ in pol.speed_targets],
                {spd: w for spd, w in pol.speed_targets})
        if target is not None:
            nominal += float(np.clip(target - nominal,
                                     -pol.accel_limit * dt, pol.accel_limit * dt))
        if pol.speed_sigma > 0.0:
            dev = rho * dev + innovation * rng.standard_normal()
            dev = float(np.clip(dev, -3.0 * pol.speed_sigma, 3.0 * pol.speed_sigma))
        v = max(nominal + dev, 0.0)

        step = v * dt
        s += step
        traveled += step
        # choose the branch shortly before the end of the lane
        if branch_next is None and scenario.successors(lane.lane_id):
            if lane.length - s < pol.decision_distance:
                branch_next = _weighted_choice(
                    rng, scenario.successors(lane.lane_id), pol.branch_weights)
        while s > lane.length:
            succs = scenario.successors(lane.lane_id)
            if not succs:
                raise OffMap(
                    f"actor {spec.actor_id} left lane {lane.lane_id} at tick {tick}")
            nxt = branch_next if branch_next is not None else _weighted_choice(
                rng, succs, pol.branch_weights)
            s -= lane.length
            lane = scenario.lanes[nxt]
            route.append(nxt)
            choices.append(len(succs) > 1)
            branch_next = None

    return Rollout(actor_id=spec.actor_id, states=tuple(states),
                   lane_per_tick=tuple(lane_ids), route=tuple(route),
                   route_is_choice=tuple(choices), dt=dt)


def simulate_scenario(scenario: Scenario, seed: int, num_ticks: int,
                      dt: float = 0.1) -> list:
    """Roll every actor in the scenario independently under one seed."""
    return [simulate_actor(scenario, spec, seed, num_ticks, dt)
            for spec in scenario.actors]
