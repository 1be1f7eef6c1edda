"""Training objectives for multimodal trajectory prediction.

Reference implementations operate on plain trajectories and are used by
the evaluation stack and as oracles; the ``training_loss`` builder
produces the same quantities as autodiff graphs over a batch of network
outputs.

The multiple-trajectory objective is winner-take-all: a best-matching
mode is chosen per sample (by average displacement, or by endpoint
angle with a threshold and displacement tie-break), the regression term
touches only that mode, and the cross-entropy term pushes its
probability toward one.  The mode choice itself is never differentiated
through; it is recomputed from scratch on every forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gather_rows, logsumexp, softmax
from .geometry import MultimodalPrediction, Trajectory, normalize_angle
from .network import MDN, ModelConfig, forward_batch, split_output

DISPLACEMENT = "displacement"
ANGLE = "angle"

LOG_TWO_PI = math.log(2.0 * math.pi)
DEGENERATE_ENDPOINT = 1e-6


class HorizonMismatch(ValueError):
    pass


class SingularCovariance(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class DistancePolicy:
    """How the best-matching mode is found.

    With ``kind="angle"``, every mode whose endpoint bearing differs
    from the ground truth's by less than ``angle_threshold`` is a
    potential match and displacement breaks the tie among them; if no
    mode qualifies the smallest angle wins.
    """

    kind: str = DISPLACEMENT
    angle_threshold: float = math.radians(5.0)

    def __post_init__(self):
        if self.kind not in (DISPLACEMENT, ANGLE):
            raise ValueError(f"unknown distance policy {self.kind!r}")
        if self.angle_threshold <= 0:
            raise ValueError("angle threshold must be positive")


@dataclass(frozen=True)
class MtpConfig:
    alpha: float = 1.0
    policy: DistancePolicy = field(default_factory=DistancePolicy)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


# ---------------------------------------------------------------------------
# Reference (array) implementations
# ---------------------------------------------------------------------------

def _check_horizons(gt: Trajectory, pred: Trajectory):
    if gt.horizon != pred.horizon:
        raise HorizonMismatch(f"{gt.horizon} vs {pred.horizon} waypoints")


def displacement_loss(gt: Trajectory, pred: Trajectory) -> float:
    """Average pointwise L2 distance between two trajectories."""
    _check_horizons(gt, pred)
    return _displacement_arrays(gt.points, pred.points)


def _displacement_arrays(gt: np.ndarray, pred: np.ndarray) -> float:
    return float(np.linalg.norm(gt - pred, axis=-1).mean())


def angle_distance(gt: Trajectory, pred: Trajectory) -> float:
    """Absolute difference of endpoint bearings, in [0, pi]."""
    from .geometry import trajectory_endpoint_bearing
    _check_horizons(gt, pred)
    return abs(normalize_angle(trajectory_endpoint_bearing(gt)
                               - trajectory_endpoint_bearing(pred)))


def _endpoint_bearings(points: np.ndarray):
    """Bearings of (M, H, 2) endpoints; +inf marks degenerate modes."""
    ends = points[:, -1, :]
    norms = np.linalg.norm(ends, axis=-1)
    bearings = np.arctan2(ends[:, 1], ends[:, 0])
    return np.where(norms < DEGENERATE_ENDPOINT, np.inf, bearings)


def select_best_mode_arrays(gt: np.ndarray, modes: np.ndarray,
                            policy: DistancePolicy) -> int:
    """Index of the mode matching ``gt`` best under the policy.

    Degenerate endpoints (closer than 1e-6 m to the origin, e.g. a
    stopped vehicle) make the angle undefined; such samples fall back
    to the displacement policy, and such modes never qualify by angle.
    """
    disp = np.linalg.norm(modes - gt[None], axis=-1).mean(axis=-1)
    if policy.kind == DISPLACEMENT:
        return int(np.argmin(disp))

    gt_norm = np.linalg.norm(gt[-1])
    if gt_norm < DEGENERATE_ENDPOINT:
        return int(np.argmin(disp))
    gt_bearing = math.atan2(gt[-1, 1], gt[-1, 0])
    bearings = _endpoint_bearings(modes)
    finite = np.isfinite(bearings)
    if not finite.any():
        return int(np.argmin(disp))
    angles = np.where(
        finite, np.abs(normalize_angle(np.where(finite, bearings, 0.0)
                                       - gt_bearing)), np.inf)
    qualifying = angles < policy.angle_threshold
    if qualifying.any():
        masked = np.where(qualifying, disp, np.inf)
        return int(np.argmin(masked))
    return int(np.argmin(angles))


def select_best_mode(gt: Trajectory, modes, policy: DistancePolicy) -> int:
    mode_pts = np.stack([m.points for m in modes])
    for m in modes:
        _check_horizons(gt, m)
    return select_best_mode_arrays(gt.points, mode_pts, policy)


def me_loss(gt: Trajectory, prediction: MultimodalPrediction) -> float:
    """Probability-weighted expected displacement over the modes."""
    return float(sum(p * displacement_loss(gt, mode)
                     for p, mode in zip(prediction.probabilities, prediction.modes)))


def mtp_loss(gt: Trajectory, prediction: MultimodalPrediction,
             config: MtpConfig | None = None):
    """Winner-take-all loss; returns (value, winner index)."""
    config = config or MtpConfig()
    winner = select_best_mode(gt, prediction.modes, config.policy)
    p_winner = prediction.probabilities[winner]
    value = -math.log(p_winner) + config.alpha * displacement_loss(
        gt, prediction.modes[winner])
    return value, winner


def _gaussian_log_density(diff: np.ndarray, cov: np.ndarray) -> float:
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det < 1e-12:
        raise SingularCovariance(f"covariance determinant {det:.3e}")
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    maha = float(diff @ inv @ diff)
    return -LOG_TWO_PI - 0.5 * math.log(det) - 0.5 * maha


def mdn_loss(gt: Trajectory, prediction: MultimodalPrediction) -> float:
    """Negative log-likelihood of ``gt`` under the Gaussian mixture,
    evaluated in log space with a log-sum-exp over modes."""
    if prediction.covariances is None:
        raise SingularCovariance("prediction carries no covariances")
    log_terms = []
    with np.errstate(divide="ignore"):
        for m, (p, mode) in enumerate(zip(prediction.probabilities,
                                          prediction.modes)):
            _check_horizons(gt, mode)
            ll = sum(_gaussian_log_density(gt.points[h] - mode.points[h],
                                           prediction.covariances[m, h])
                     for h in range(gt.horizon))
            log_terms.append(np.log(p) + ll)
    peak = max(log_terms)
    if not np.isfinite(peak):
        raise SingularCovariance("all mixture components have zero weight")
    return float(-(peak + np.log(np.sum(np.exp(np.array(log_terms) - peak)))))


# ---------------------------------------------------------------------------
# Training-graph implementations
# ---------------------------------------------------------------------------

LOSS_KINDS = ("stp", "me", "mtp-disp", "mtp-angle", "mdn")


def _policy_for_kind(kind: str, mtp: MtpConfig) -> DistancePolicy:
    if kind == "mtp-angle":
        return DistancePolicy(kind=ANGLE, angle_threshold=mtp.policy.angle_threshold)
    return DistancePolicy(kind=DISPLACEMENT)


def _displacement_graph(pos: Tensor, gt: np.ndarray) -> Tensor:
    """Mean pointwise distance; pos (..., H, 2) against matching gt."""
    diff = pos - Tensor(gt)
    sq = (diff * diff).sum(axis=-1)
    return sq.sqrt().mean(axis=-1)


def pick_winners(positions: np.ndarray, gt: np.ndarray,
                 policy: DistancePolicy) -> np.ndarray:
    """Per-sample best-mode indices, computed outside the graph."""
    return np.array([select_best_mode_arrays(gt[b], positions[b], policy)
                     for b in range(len(gt))], dtype=np.intp)


def training_loss(raw: Tensor, gt: np.ndarray, config: ModelConfig, kind: str,
                  mtp: MtpConfig | None = None, winners: np.ndarray | None = None):
    """Scalar loss tensor over a batch of flat network outputs.

    ``winners`` overrides the per-sample best-mode selection (used by
    gradient checks that must hold the selection fixed; training always
    recomputes it).  Returns (loss, winner indices or None).
    """
    if raw.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if gt.shape[1] != config.horizon:
        raise HorizonMismatch(f"{gt.shape[1]} vs horizon {config.horizon}")
    mtp = mtp or MtpConfig()
    positions, logits, cov = split_output(raw, config)

    if kind == "stp":
        if config.num_modes != 1:
            raise ValueError("stp loss requires a single-mode model")
        return _displacement_graph(positions[:, 0], gt).mean(), None

    if kind == "me":
        probs = softmax(logits, axis=1)
        per_mode = _displacement_graph(positions, gt[:, None])
        return (probs * per_mode).sum(axis=1).mean(), None

    if kind in ("mtp-disp", "mtp-angle"):
        if winners is None:
            winners = pick_winners(positions.data, gt, _policy_for_kind(kind, mtp))
        cross_entropy = logsumexp(logits, axis=1) - gather_rows(logits, winners)
        winner_disp = _displacement_graph(gather_rows(positions, winners), gt)
        return (cross_entropy + winner_disp * mtp.alpha).mean(), winners

    if kind == "mdn":
        if config.head != MDN:
            raise ValueError("mdn loss requires the mixture-density head")
        l00 = cov[:, :, :, 0].softplus()
        l11 = cov[:, :, :, 1].softplus()
        l10 = cov[:, :, :, 2]
        diff = Tensor(gt[:, None]) - positions
        z0 = diff[:, :, :, 0] / l00
        z1 = (diff[:, :, :, 1] - l10 * z0) / l11
        point_ll = (l00.log() + l11.log() + (z0 * z0 + z1 * z1) * 0.5
                    + LOG_TWO_PI) * -1.0
        mode_ll = point_ll.sum(axis=2)
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        return -logsumexp(log_probs + mode_ll, axis=1).mean(), None

    raise ValueError(f"unknown loss kind {kind!r}; pick one of {LOSS_KINDS}")


def batch_loss(samples, params: dict, config: ModelConfig, kind: str,
               mtp: MtpConfig | None = None) -> float:
    """Mean per-sample loss of the model over a list of samples."""
    if not samples:
        raise EmptyBatch("no samples")
    rasters = np.stack([s.raster.data for s in samples]).astype(np.float64)
    feats = np.stack([s.state_features for s in samples]).astype(np.float64)
    gt = np.stack([s.ground_truth.points for s in samples])
    raw = forward_batch(params, config, rasters, feats)
    loss, _ = training_loss(raw, gt, config, kind, mtp)
    return loss.item()
