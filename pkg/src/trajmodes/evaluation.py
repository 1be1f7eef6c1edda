"""Evaluation protocol: error metrics, mode filtering, maneuver slices
and probability calibration.

Reported numbers follow the motion-forecasting convention: modes below
a probability threshold (default 0.2) are discarded and the
lowest-error survivor is scored, since the most-probable-mode metric
rewards unimodal models for predicting the mean of several futures.
Displacement is decomposed into along-track and cross-track components
against the tangent of the ground-truth path, which makes
``along^2 + cross^2 == displacement^2`` hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import MultimodalPrediction, Trajectory
from .losses import DistancePolicy, displacement_loss, select_best_mode

PROBABILITY_THRESHOLD = 0.2
SLICE_ALL = "all"
_TANGENT_EPS = 1e-12


class EmptyDataset(ValueError):
    pass


def _tangent_at(gt: Trajectory, h: int) -> np.ndarray:
    """Unit tangent of the ground-truth path at step ``h``.

    The first step's tangent is taken from the actor origin; degenerate
    (coincident) points fall back to the actor-frame x-axis.
    """
    prev = gt.points[h - 1] if h > 0 else np.zeros(2)
    vec = gt.points[h] - prev
    norm = np.linalg.norm(vec)
    if norm < _TANGENT_EPS:
        return np.array([1.0, 0.0])
    return vec / norm


def along_cross_errors(gt: Trajectory, pred: Trajectory, h: int):
    """Magnitudes of the error components along and across the
    ground-truth path direction at horizon step ``h``."""
    if h >= gt.horizon or h >= pred.horizon:
        raise IndexError(f"horizon step {h} out of range")
    tangent = _tangent_at(gt, h)
    normal = np.array([-tangent[1], tangent[0]])
    err = pred.points[h] - gt.points[h]
    return abs(float(err @ tangent)), abs(float(err @ normal))


def filter_and_pick(prediction: MultimodalPrediction, gt: Trajectory,
                    threshold: float = PROBABILITY_THRESHOLD) -> int:
    """Lowest-error mode among those with probability >= threshold;
    falls back to the most probable mode when nothing qualifies."""
    probs = prediction.probabilities
    qualifying = np.flatnonzero(probs >= threshold)
    if qualifying.size == 0:
        return int(np.argmax(probs))
    errors = [displacement_loss(gt, prediction.modes[i]) for i in qualifying]
    return int(qualifying[int(np.argmin(errors))])


@dataclass(frozen=True)
class MetricReport:
    method: str
    slice_label: str
    horizon_label: str
    displacement: float
    along_track: float
    cross_track: float
    count: int


def _per_sample_errors(gt: Trajectory, mode: Trajectory):
    """displacement/along/cross arrays over every horizon step."""
    disp = np.linalg.norm(mode.points - gt.points, axis=1)
    along = np.empty(gt.horizon)
    cross = np.empty(gt.horizon)
    for h in range(gt.horizon):
        along[h], cross[h] = along_cross_errors(gt, mode, h)
    return disp, along, cross


def evaluate(samples, predictor, method: str = "model",
             threshold: float = PROBABILITY_THRESHOLD,
             horizons_s: tuple = (1.0,)) -> list:
    """Chosen-mode errors aggregated overall and per maneuver slice.

    Rows are produced at each requested horizon (clamped to the data),
    at the final step, and averaged over the whole horizon.
    """
    samples = list(samples)
    if not samples:
        raise EmptyDataset("nothing to evaluate")
    horizon = samples[0].ground_truth.horizon
    dt = samples[0].ground_truth.dt
    steps = sorted({min(max(int(round(t / dt)) - 1, 0), horizon - 1)
                    for t in horizons_s} | {horizon - 1})
    labels = [f"@{(h + 1) * dt:g}s" for h in steps] + ["avg"]

    rows = {}
    for sample in samples:
        gt = sample.ground_truth
        prediction = predictor(sample)
        chosen = prediction.modes[filter_and_pick(prediction, gt, threshold)]
        disp, along, cross = _per_sample_errors(gt, chosen)
        cells = [(disp[h], along[h], cross[h]) for h in steps]
        cells.append((disp.mean(), along.mean(), cross.mean()))
        for slice_label in (SLICE_ALL, sample.maneuver_label):
            for label, cell in zip(labels, cells):
                rows.setdefault((slice_label, label), []).append(cell)

    reports = []
    for (slice_label, label), cells in sorted(rows.items()):
        n = len(cells)
        # fsum is exactly rounded, so aggregation ignores dataset order
        reports.append(MetricReport(
            method=method, slice_label=slice_label, horizon_label=label,
            displacement=math.fsum(c[0] for c in cells) / n,
            along_track=math.fsum(c[1] for c in cells) / n,
            cross_track=math.fsum(c[2] for c in cells) / n,
            count=n))
    return reports


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationBucket:
    lower: float
    upper: float
    mean_predicted: float
    frequency: float
    count: int


@dataclass(frozen=True)
class CalibrationTable:
    buckets: tuple

    def mean_absolute_deviation(self) -> float:
        """Mean |predicted - empirical| over populated buckets."""
        if not self.buckets:
            return math.nan
        return float(np.mean([abs(b.mean_predicted - b.frequency)
                              for b in self.buckets]))


def calibration(samples, predictor, bucket_count: int = 10,
                policy: DistancePolicy | None = None) -> CalibrationTable:
    """Bucket every predicted mode probability and report how often that
    mode was the best match to the ground truth; empty buckets are
    omitted."""
    samples = list(samples)
    if not samples:
        raise EmptyDataset("nothing to calibrate")
    policy = policy or DistancePolicy()
    edges = np.linspace(0.0, 1.0, bucket_count + 1)
    probs, hits = [], []
    for sample in samples:
        prediction = predictor(sample)
        if prediction.num_modes < 2:
            raise ValueError("calibration needs at least two modes")
        best = select_best_mode(sample.ground_truth, prediction.modes, policy)
        for m, p in enumerate(prediction.probabilities):
            probs.append(float(p))
            hits.append(1.0 if m == best else 0.0)
    probs = np.asarray(probs)
    hits = np.asarray(hits)
    idx = np.clip(np.digitize(probs, edges) - 1, 0, bucket_count - 1)
    buckets = []
    for b in range(bucket_count):
        mask = idx == b
        if not mask.any():
            continue
        buckets.append(CalibrationBucket(
            lower=float(edges[b]), upper=float(edges[b + 1]),
            mean_predicted=float(probs[mask].mean()),
            frequency=float(hits[mask].mean()),
            count=int(mask.sum())))
    return CalibrationTable(buckets=tuple(buckets))


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

CSV_HEADER = "method,slice,horizon,displacement,along_track,cross_track,count"


def reports_to_csv(reports) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(f"{r.method},{r.slice_label},{r.horizon_label},"
                     f"{r.displacement:.6f},{r.along_track:.6f},"
                     f"{r.cross_track:.6f},{r.count}")
    return "\n".join(lines) + "\n"


def reports_from_csv(text: str) -> list:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unrecognized report header")
    out = []
    for line in lines[1:]:
        method, slc, horizon, disp, along, cross, count = line.split(",")
        out.append(MetricReport(method=method, slice_label=slc,
                                horizon_label=horizon, displacement=float(disp),
                                along_track=float(along), cross_track=float(cross),
                                count=int(count)))
    return out


def reports_to_markdown(reports, bold_best: bool = False) -> str:
    """One aligned-column row per method over the ``all`` slice, with
    displacement / along-track / cross-track blocks per horizon."""
    rows = [r for r in reports if r.slice_label == SLICE_ALL]
    if not rows:
        raise ValueError("no overall rows to format")
    horizons = sorted({r.horizon_label for r in rows},
                      key=lambda l: (l == "avg", l))
    methods = sorted({r.method for r in rows})
    table = {(r.method, r.horizon_label): r for r in rows}
    if len(table) != len(rows):
        raise ValueError("duplicate method/horizon rows")

    metrics = [("displacement", "Disp"), ("along_track", "Along"),
               ("cross_track", "Cross")]
    columns = [f"{short} {h}" for _, short in metrics for h in horizons]
    values = {}
    for method in methods:
        vals = []
        for attr, _ in metrics:
            for h in horizons:
                cell = table.get((method, h))
                vals.append(getattr(cell, attr) if cell else math.nan)
        values[method] = vals

    best = [min((values[m][i] for m in methods
                 if not math.isnan(values[m][i])), default=math.nan)
            for i in range(len(columns))]

    def fmt(v, i):
        if math.isnan(v):
            return "-"
        text = f"{v:.2f}"
        if bold_best and v == best[i]:
            text = f"**{text}**"
        return text

    header = ["method"] + columns
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for method in methods:
        cells = [method] + [fmt(v, i) for i, v in enumerate(values[method])]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
