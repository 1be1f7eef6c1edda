"""Sample extraction from rollouts and dataset persistence.

A sample pairs one actor-centric raster with the actor's three scalar
state features (speed, acceleration, heading-change rate) and the next
H waypoints expressed in that tick's actor frame.  Samples are stored
with float32 payloads from the moment they are created, so a disk
round-trip is bit-exact.

On disk a dataset is a directory holding ``manifest.txt`` (UTF-8
``key:value`` lines) and ``samples.bin`` (little-endian records:
u64 payload length, raster f32 channel-major row-major, 3xf32 state
features, Hx2 f32 ground truth, u8 maneuver label, i64 followed-lane id
or -1, u32 CRC-32 of the payload).
"""

from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ActorFrame, Trajectory, classify_maneuver
from .raster import RasterConfig, RasterImage, rasterize, rasterize_with_lane
from .scene import Rollout, Scenario

FORMAT_VERSION = "1"
MANEUVER_LABELS = ("left", "straight", "right")
STATIC_SPEED_THRESHOLD = 0.1


class FormatVersionMismatch(RuntimeError):
    pass


class CorruptRecord(RuntimeError):
    pass


@dataclass(frozen=True)
class Sample:
    raster: RasterImage
    state_features: np.ndarray
    ground_truth: Trajectory
    maneuver_label: str
    followed_lane_id: int | None = None

    def __post_init__(self):
        feats = np.asarray(self.state_features, dtype=np.float32).reshape(3)
        if not np.all(np.isfinite(feats)):
            raise ValueError("state features must be finite")
        if self.maneuver_label not in MANEUVER_LABELS:
            raise ValueError(f"unknown maneuver label {self.maneuver_label!r}")
        object.__setattr__(self, "state_features", feats)


def extract_samples(scenario: Scenario, rollouts, horizon: int, dt: float,
                    raster_config: RasterConfig,
                    static_speed: float = STATIC_SPEED_THRESHOLD,
                    targets=None) -> list:
    """One sample per tick that still has a full horizon ahead of it.

    Actors that stay below ``static_speed`` for the whole window are
    dropped.  Every rollout in ``rollouts`` doubles as context for the
    others: actor boxes present at the same tick land in the
    other-actors channel.  ``targets`` restricts which rollouts produce
    samples (all of them by default).
    """
    samples = []
    for target_roll in (rollouts if targets is None else targets):
        states = target_roll.states
        for t in range(len(states) - horizon):
            window = states[t:t + horizon + 1]
            if max(st.velocity for st in window) < static_speed:
                continue
            anchor = states[t]
            future_global = np.array([st.position for st in window[1:]])
            local = anchor.frame.to_local(future_global)
            gt = Trajectory(local.astype(np.float32).astype(np.float64), dt=dt)
            feats = np.array([anchor.velocity, anchor.acceleration,
                              anchor.heading_change_rate], dtype=np.float32)
            context = [r.states[t] for r in rollouts if len(r) > t]
            followed = target_roll.followed_lane(t)
            if raster_config.include_lf_layer:
                img = rasterize_with_lane(scenario, context, anchor,
                                          followed, raster_config)
            else:
                img = rasterize(scenario, context, anchor, raster_config)
            samples.append(Sample(
                raster=img, state_features=feats, ground_truth=gt,
                maneuver_label=classify_maneuver(gt),
                followed_lane_id=followed))
    return samples


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    horizon: int
    dt: float
    resolution: float
    channels: tuple

    def __len__(self):
        return len(self.samples)

    def stacked(self):
        """Contiguous training arrays: rasters, features, targets."""
        rasters = np.stack([s.raster.data for s in self.samples]).astype(np.float64)
        feats = np.stack([s.state_features for s in self.samples]).astype(np.float64)
        targets = np.stack([s.ground_truth.points for s in self.samples])
        return rasters, feats, targets


def write_dataset(samples, path, dt: float = 0.1, horizon: int | None = None,
                  resolution: float | None = None,
                  channels: tuple | None = None) -> dict:
    """Write samples + manifest; returns the manifest as a dict."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if samples:
        first = samples[0]
        horizon = first.ground_truth.horizon
        dt = first.ground_truth.dt
        resolution = first.raster.resolution
        channels = first.raster.channels
        c, h, w = first.raster.data.shape
    else:
        horizon = horizon or 0
        resolution = resolution or 0.0
        channels = tuple(channels or ())
        c, h, w = len(channels), 0, 0

    manifest = {
        "format_version": FORMAT_VERSION,
        "count": str(len(samples)),
        "horizon": str(horizon),
        "dt": repr(float(dt)),
        "raster_channels": str(c),
        "raster_height": str(h),
        "raster_width": str(w),
        "resolution": repr(float(resolution)),
        "channel_names": ",".join(channels),
    }
    with open(path / "manifest.txt", "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f"{key}:{value}\n")

    with open(path / "samples.bin", "wb") as fh:
        for s in samples:
            payload = (
                np.ascontiguousarray(s.raster.data, dtype="<f4").tobytes()
                + np.ascontiguousarray(s.state_features, dtype="<f4").tobytes()
                + np.ascontiguousarray(
                    s.ground_truth.points, dtype="<f4").tobytes()
                + struct.pack("<B", MANEUVER_LABELS.index(s.maneuver_label))
                + struct.pack("<q", -1 if s.followed_lane_id is None
                              else int(s.followed_lane_id))
            )
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", binascii.crc32(payload) & 0xFFFFFFFF))
    return manifest


def _read_manifest(path: Path) -> dict:
    manifest_path = path / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatVersionMismatch(f"malformed manifest line: {line!r}")
        manifest[key] = value
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"expected format_version {FORMAT_VERSION}, "
            f"got {manifest.get('format_version')!r}")
    return manifest


def read_dataset(path) -> Dataset:
    """Load a dataset directory; raises CorruptRecord on damaged data."""
    path = Path(path)
    manifest = _read_manifest(path)
    count = int(manifest["count"])
    horizon = int(manifest["horizon"])
    dt = float(manifest["dt"])
    resolution = float(manifest["resolution"])
    c = int(manifest["raster_channels"])
    h = int(manifest["raster_height"])
    w = int(manifest["raster_width"])
    channels = tuple(n for n in manifest["channel_names"].split(",") if n)

    raster_bytes = 4 * c * h * w
    expected_payload = raster_bytes + 4 * 3 + 4 * 2 * horizon + 1 + 8
    identity = ActorFrame(origin=np.zeros(2), rotation=0.0)

    blob = (path / "samples.bin").read_bytes()
    samples, offset = [], 0
    for i in range(count):
        if offset + 8 > len(blob):
            raise CorruptRecord(f"record {i}: missing length prefix")
        (length,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if length != expected_payload:
            raise CorruptRecord(
                f"record {i}: payload length {length}, expected {expected_payload}")
        if offset + length + 4 > len(blob):
            raise CorruptRecord(f"record {i}: truncated payload")
        payload = blob[offset:offset + length]
        offset += length
        (crc,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if crc != binascii.crc32(payload) & 0xFFFFFFFF:
            raise CorruptRecord(f"record {i}: checksum mismatch")

        pos = 0
        raster_data = np.frombuffer(
            payload, dtype="<f4", count=c * h * w).reshape(c, h, w)
        pos += raster_bytes
        feats = np.frombuffer(payload, dtype="<f4", count=3, offset=pos)
        pos += 12
        gt = np.frombuffer(payload, dtype="<f4", count=2 * horizon,
                           offset=pos).reshape(horizon, 2)
        pos += 8 * horizon
        (label_code,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        (followed,) = struct.unpack_from("<q", payload, pos)
        if label_code >= len(MANEUVER_LABELS):
            raise CorruptRecord(f"record {i}: bad maneuver label {label_code}")

        samples.append(Sample(
            raster=RasterImage(data=raster_data.copy(), resolution=resolution,
                               frame=identity, channels=channels),
            state_features=feats.copy(),
            ground_truth=Trajectory(gt.astype(np.float64), dt=dt),
            maneuver_label=MANEUVER_LABELS[label_code],
            followed_lane_id=None if followed < 0 else int(followed)))
    if offset != len(blob):
        raise CorruptRecord("trailing bytes after the last record")
    return Dataset(samples=samples, horizon=horizon, dt=dt,
                   resolution=resolution, channels=channels)
