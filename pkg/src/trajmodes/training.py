"""Mini-batch training with Adam, validation tracking and checkpoints.

Batching is stateless: the shuffle for epoch e is drawn from a
generator seeded with (seed, e), so resuming from a checkpoint replays
exactly the batches the uninterrupted run would have seen and the loss
trajectory continues bit-for-bit (single-threaded).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, load_checkpoint, save_checkpoint
from .losses import EmptyBatch, MtpConfig, DistancePolicy, ANGLE, training_loss
from .network import (
    ModelConfig,
    config_from_meta,
    config_to_meta,
    decode,
    forward,
    forward_batch,
    init_model,
)

LOG_HEADER = "epoch,step,train_loss,val_loss"


class NumericalFailure(RuntimeError):
    """Loss became non-finite; carries the last finite step for diagnosis."""


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mtp-disp"
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_interval: int = 20_000
    alpha: float = 1.0
    angle_threshold: float = math.radians(5.0)
    val_fraction: float = 0.2
    seed: int = 0

    def mtp(self) -> MtpConfig:
        policy = DistancePolicy(kind=ANGLE, angle_threshold=self.angle_threshold) \
            if self.loss == "mtp-angle" else DistancePolicy()
        return MtpConfig(alpha=self.alpha, policy=policy)


# mirrors the deployment-scale schedule (batch 64, lr 1e-4 decayed by
# 0.9 every 20k steps); not a desk-scale default
FULL_SCALE_TRAINING = TrainConfig(batch_size=64, learning_rate=1e-4,
                                  decay_factor=0.9, decay_interval=20_000)


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    history: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1


def split_indices(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(int(round(n * val_fraction)), 1) if val_fraction > 0 else 0
    if n_val >= n:
        raise EmptyBatch("validation split leaves no training data")
    return perm[n_val:], perm[:n_val]


def _evaluate_loss(params, model_config, train_config, rasters, feats, gt,
                   chunk: int = 256) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(gt), chunk):
        hi = min(lo + chunk, len(gt))
        raw = forward_batch(params, model_config, rasters[lo:hi].astype(np.float64),
                            feats[lo:hi])
        loss, _ = training_loss(raw, gt[lo:hi], model_config,
                                train_config.loss, train_config.mtp())
        total += loss.item() * (hi - lo)
        count += hi - lo
    return total / count


def training_arrays(data):
    """Accept a list of samples or a ready (rasters, features, gt, dt) tuple."""
    if isinstance(data, tuple):
        rasters, feats, gt, dt = data
        return (np.asarray(rasters), np.asarray(feats, dtype=np.float64),
                np.asarray(gt, dtype=np.float64), float(dt))
    samples = list(data)
    if not samples:
        raise EmptyBatch("no training samples")
    return (np.stack([s.raster.data for s in samples]),
            np.stack([s.state_features for s in samples]).astype(np.float64),
            np.stack([s.ground_truth.points for s in samples]),
            samples[0].ground_truth.dt)


def train(model_config: ModelConfig, data, train_config: TrainConfig,
          checkpoint_path=None, log=None, resume_from=None) -> TrainResult:
    """Train on samples (or pre-stacked arrays); returns params + history.

    ``log`` receives one CSV line per epoch.  When ``checkpoint_path``
    is given, the epoch with the best validation loss is saved there
    (parameters, optimizer moments, epoch counter and model meta).
    """
    rasters, feats, gt, dt = training_arrays(data)
    if len(gt) == 0:
        raise EmptyBatch("no training samples")

    train_idx, val_idx = split_indices(len(gt), train_config.val_fraction,
                                       train_config.seed)

    params = init_model(model_config)
    optimizer = Adam(params, lr=train_config.learning_rate,
                     decay_factor=train_config.decay_factor,
                     decay_interval=train_config.decay_interval)
    start_epoch = 0
    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        if config_from_meta(meta) != model_config:
            raise ValueError("checkpoint was trained with a different model config")
        for name, p in params.items():
            p.data = np.array(arrays[name])
        optimizer.load_state_arrays(arrays)
        start_epoch = int(arrays["train.epoch"][0])

    result = TrainResult(params=params, model_config=model_config)
    if log:
        log(LOG_HEADER)

    last_finite = (0, math.nan)
    for epoch in range(start_epoch, train_config.epochs):
        order = np.random.default_rng((train_config.seed, epoch)).permutation(
            train_idx)
        for lo in range(0, len(order), train_config.batch_size):
            batch = order[lo:lo + train_config.batch_size]
            raw = forward_batch(params, model_config,
                                rasters[batch].astype(np.float64), feats[batch])
            loss, _ = training_loss(raw, gt[batch], model_config,
                                    train_config.loss, train_config.mtp())
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalFailure(
                    f"non-finite loss at epoch {epoch} step "
                    f"{optimizer.step_count + 1}; last finite step "
                    f"{last_finite[0]} had loss {last_finite[1]:.6f}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            last_finite = (optimizer.step_count, value)

        train_loss = _evaluate_loss(params, model_config, train_config,
                                    rasters[train_idx], feats[train_idx],
                                    gt[train_idx])
        val_loss = _evaluate_loss(params, model_config, train_config,
                                  rasters[val_idx], feats[val_idx], gt[val_idx]) \
            if len(val_idx) else math.nan
        row = f"{epoch},{optimizer.step_count},{train_loss:.9f},{val_loss:.9f}"
        result.history.append((epoch, optimizer.step_count, train_loss, val_loss))
        if log:
            log(row)

        tracked = val_loss if len(val_idx) else train_loss
        if tracked < result.best_val:
            result.best_val = tracked
            result.best_epoch = epoch
            if checkpoint_path is not None:
                _save_state(checkpoint_path, params, optimizer, epoch + 1,
                            model_config, train_config, dt)
    return result


def _save_state(path, params, optimizer, next_epoch, model_config,
                train_config, dt):
    arrays = {name: p.data for name, p in params.items()}
    arrays.update(optimizer.state_arrays())
    arrays["train.epoch"] = np.array([float(next_epoch)])
    meta = config_to_meta(model_config)
    meta["loss"] = train_config.loss
    meta["dt"] = repr(float(dt))
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Load (params, model_config, meta) from a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    model_config = config_from_meta(meta)
    params = {}
    for name, arr in arrays.items():
        if name.startswith("adam.") or name.startswith("train."):
            continue
        params[name] = Tensor(np.array(arr), requires_grad=True)
    return params, model_config, meta


def model_predictor(params: dict, config: ModelConfig, dt: float = 0.1):
    """Prediction closure for the evaluation stack."""
    def predict(sample):
        raw = forward(params, config, sample.raster.data.astype(np.float64),
                      sample.state_features.astype(np.float64))
        return decode(raw, dt=dt)
    return predict
