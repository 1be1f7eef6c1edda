"""Physics baselines: forward propagation of the tracked state.

The propagation baseline rolls the current state estimate forward under
a constant turn-rate-and-acceleration model, exactly what a tracking
filter does when asked to predict with no further measurements.  The
single-trajectory predictor is simply the learned model with M = 1 and
lives in :mod:`trajmodes.network` (re-exported here).
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import ActorState, MultimodalPrediction, Trajectory
from .network import stp_config  # noqa: F401  (baseline configuration)


def propagate_state(state: ActorState, horizon: int, dt: float = 0.1) -> Trajectory:
    """Constant turn-rate/acceleration rollout in the tick-0 actor frame.

    Discrete closed loop: the position advances along the current
    heading at the current speed, then heading and speed integrate
    their constant rates.
    """
    v = state.velocity
    a = state.acceleration
    omega = state.heading_change_rate
    x = y = theta = 0.0
    points = np.empty((horizon, 2))
    for k in range(horizon):
        x += v * math.cos(theta) * dt
        y += v * math.sin(theta) * dt
        theta += omega * dt
        v += a * dt
        points[k] = (x, y)
    return Trajectory(points, dt=dt)


def propagation_predictor(horizon: int, dt: float = 0.1):
    """Predictor closure for the evaluation stack: one certain mode,
    built from a sample's scalar state features."""
    def predict(sample) -> MultimodalPrediction:
        speed, accel, hcr = (float(v) for v in sample.state_features)
        state = ActorState(position=(0.0, 0.0), velocity=speed,
                           acceleration=accel, heading=0.0,
                           heading_change_rate=hcr)
        return MultimodalPrediction(
            modes=(propagate_state(state, horizon, dt),),
            probabilities=np.array([1.0]))
    return predict
