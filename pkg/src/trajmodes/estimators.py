"""scikit-learn compatible estimator facade.

The trainable predictor and the physics baseline both work on flat 2-D
feature matrices so they compose with pipelines, grid search and the
usual model-selection tooling: each row is the flattened raster
followed by the three scalar state features, and targets are flattened
(x1, y1, ..., xH, yH) waypoint rows.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .baselines import propagate_state
from .geometry import ActorState
from .losses import LOSS_KINDS
from .network import (
    MDN,
    ModelConfig,
    RawOutput,
    decode,
    forward_batch,
)
from .training import TrainConfig, train


def samples_to_arrays(samples):
    """Flatten dataset samples into (X, y) estimator matrices."""
    X = np.stack([np.concatenate([s.raster.data.reshape(-1),
                                  s.state_features]) for s in samples])
    y = np.stack([s.ground_truth.points.reshape(-1) for s in samples])
    return X.astype(np.float64), y.astype(np.float64)


class MultimodalTrajectoryPredictor(BaseEstimator):
    """CNN trajectory predictor with M probabilistic modes.

    Parameters mirror the model and training configuration; see
    :class:`trajmodes.network.ModelConfig` and
    :class:`trajmodes.training.TrainConfig`.  ``raster_shape`` tells the
    estimator how to unflatten the first ``C*H*W`` columns of X; the
    remaining three columns are speed, acceleration and heading-change
    rate.
    """

    def __init__(self, raster_shape=(4, 64, 64), num_modes=2, horizon=60,
                 dt=0.1, loss="mtp-disp", conv_layers=((8, 3, 2), (16, 3, 2)),
                 dense_units=(64,), epochs=5, batch_size=32,
                 learning_rate=1e-3, decay_factor=0.9, decay_interval=20_000,
                 alpha=1.0, angle_threshold=math.radians(5.0),
                 val_fraction=0.2, mode_bias_spread=0.5, seed=0):
        self.raster_shape = raster_shape
        self.num_modes = num_modes
        self.horizon = horizon
        self.dt = dt
        self.loss = loss
        self.conv_layers = conv_layers
        self.dense_units = dense_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_factor = decay_factor
        self.decay_interval = decay_interval
        self.alpha = alpha
        self.angle_threshold = angle_threshold
        self.val_fraction = val_fraction
        self.mode_bias_spread = mode_bias_spread
        self.seed = seed

    # -- plumbing --------------------------------------------------------
    def _model_config(self) -> ModelConfig:
        c, h, w = self.raster_shape
        head = MDN if self.loss == "mdn" else "regression"
        num_modes = 1 if self.loss == "stp" else self.num_modes
        return ModelConfig(in_channels=c, in_height=h, in_width=w,
                           conv_layers=tuple(self.conv_layers),
                           dense_units=tuple(self.dense_units),
                           num_modes=num_modes, horizon=self.horizon,
                           head=head, seed=self.seed,
                           mode_bias_spread=self.mode_bias_spread)

    def _split_columns(self, X):
        X = check_array(X, dtype=np.float64)
        expected = int(np.prod(self.raster_shape)) + 3
        if X.shape[1] != expected:
            raise ValueError(
                f"X has {X.shape[1]} columns, expected {expected} "
                f"(flattened {self.raster_shape} raster + 3 state scalars)")
        rasters = X[:, :-3].reshape((len(X),) + tuple(self.raster_shape))
        return rasters, X[:, -3:]

    # -- estimator API -----------------------------------------------------
    def fit(self, X, y):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        rasters, feats = self._split_columns(X)
        y = check_array(y, dtype=np.float64)
        if y.shape != (len(X), 2 * self.horizon):
            raise ValueError(
                f"y must be (n_samples, {2 * self.horizon}), got {y.shape}")
        gt = y.reshape(len(X), self.horizon, 2)
        config = self._model_config()
        result = train(config, (rasters, feats, gt, self.dt),
                       TrainConfig(loss=self.loss, epochs=self.epochs,
                                   batch_size=self.batch_size,
                                   learning_rate=self.learning_rate,
                                   decay_factor=self.decay_factor,
                                   decay_interval=self.decay_interval,
                                   alpha=self.alpha,
                                   angle_threshold=self.angle_threshold,
                                   val_fraction=self.val_fraction,
                                   seed=self.seed))
        self.n_features_in_ = X.shape[1]
        self.params_ = result.params
        self.model_config_ = config
        self.history_ = result.history
        self.best_val_ = result.best_val
        return self

    def _raw_outputs(self, X, chunk=256):
        check_is_fitted(self, "params_")
        rasters, feats = self._split_columns(X)
        rows = []
        for lo in range(0, len(X), chunk):
            out = forward_batch(self.params_, self.model_config_,
                                rasters[lo:lo + chunk], feats[lo:lo + chunk])
            rows.append(out.data)
        return np.concatenate(rows, axis=0)

    def predict_multimodal(self, X):
        """Full output: one MultimodalPrediction per row."""
        return [decode(RawOutput(values=row, config=self.model_config_),
                       dt=self.dt)
                for row in self._raw_outputs(X)]

    def predict(self, X):
        """Most-probable-mode waypoints, flattened to (n, 2H)."""
        preds = self.predict_multimodal(X)
        return np.stack([p.modes[int(np.argmax(p.probabilities))]
                         .points.reshape(-1) for p in preds])

    def score(self, X, y):
        """Negative mean displacement of the most probable mode
        (greater is better, 0 is perfect)."""
        y = check_array(y, dtype=np.float64)
        pred = self.predict(X).reshape(len(X), self.horizon, 2)
        gt = y.reshape(len(X), self.horizon, 2)
        return -float(np.linalg.norm(pred - gt, axis=2).mean())


class KinematicStatePredictor(BaseEstimator):
    """Stateless physics baseline: constant turn-rate/acceleration
    rollout of the three state scalars (speed, acceleration,
    heading-change rate).  ``fit`` only validates."""

    def __init__(self, horizon=60, dt=0.1):
        self.horizon = horizon
        self.dt = dt

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError("X must have exactly 3 state columns")
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        rows = []
        for speed, accel, hcr in X:
            state = ActorState(position=(0.0, 0.0), velocity=speed,
                               acceleration=accel, heading=0.0,
                               heading_change_rate=hcr)
            rows.append(propagate_state(state, self.horizon, self.dt)
                        .points.reshape(-1))
        return np.stack(rows)
