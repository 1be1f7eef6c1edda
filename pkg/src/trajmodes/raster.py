"""Actor-centric bird's-eye-view rasterization.

Each raster is a stack of binary occupancy layers on a metric grid:
lane surface, lane boundaries, the target actor's box, every other
actor's box, and optionally the lane the actor is assumed to follow.
The target sits at a configurable anchor above the bottom edge with its
heading pointing up, so most of the grid covers the road ahead.

Filling uses a hard pixel-center-inside test (no anti-aliasing), and
all geometry is expressed relative to the target before any distance is
computed, which keeps rasters bit-identical under scene translation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import ActorFrame, ActorState, rotation_matrix
from .scene import LaneGeometry, Scenario


class InvalidConfig(ValueError):
    pass


class UnknownLane(KeyError):
    pass


DEFAULT_CHANNELS = ("lane_surface", "lane_boundary", "target_actor", "other_actors")
LANE_FOLLOW_CHANNEL = "lane_follow"


@dataclass(frozen=True)
class RasterConfig:
    height_px: int = 64
    width_px: int = 64
    resolution: float = 0.5
    channels: tuple = DEFAULT_CHANNELS
    anchor: float = 0.25
    include_lf_layer: bool = False

    def __post_init__(self):
        if self.resolution <= 0:
            raise InvalidConfig("resolution must be positive")
        if not 0.0 < self.anchor < 1.0:
            raise InvalidConfig("anchor must lie strictly inside (0, 1)")
        if self.height_px < 1 or self.width_px < 1:
            raise InvalidConfig("raster must be at least 1x1")
        channels = tuple(self.channels)
        if self.include_lf_layer and LANE_FOLLOW_CHANNEL not in channels:
            channels = channels + (LANE_FOLLOW_CHANNEL,)
        if len(set(channels)) != len(channels):
            raise InvalidConfig("channel names must be unique")
        object.__setattr__(self, "channels", channels)

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise InvalidConfig(f"no channel named {name!r}")


# 300x300 at 0.2 m/px mirrors the full-scale deployment layout; the
# desk-scale default above is what tests and examples train on.
FULL_SCALE = RasterConfig(height_px=300, width_px=300, resolution=0.2)


@dataclass(frozen=True)
class RasterImage:
    data: np.ndarray
    resolution: float
    frame: ActorFrame
    channels: tuple

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] != len(self.channels):
            raise InvalidConfig("raster data must be (C, H, W) with named channels")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InvalidConfig("raster values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channels.index(name)]


@lru_cache(maxsize=8)
def _pixel_centers(height_px: int, width_px: int, resolution: float, anchor: float):
    """Actor-frame coordinates (x forward, y left) of every pixel center."""
    anchor_row = (1.0 - anchor) * height_px
    rows = np.arange(height_px) + 0.5
    cols = np.arange(width_px) + 0.5
    x = (anchor_row - rows) * resolution          # forward = up
    y = (width_px / 2.0 - cols) * resolution      # left = image left
    xg, yg = np.meshgrid(x, y, indexing="ij")
    return np.stack([xg.ravel(), yg.ravel()], axis=1)


def _segment_distances(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Min distance from each point to any segment of the polyline."""
    a = polyline[:-1][None, :, :]                 # (1, S, 2)
    v = (polyline[1:] - polyline[:-1])[None, :, :]
    p = points[:, None, :]                        # (N, 1, 2)
    vv = (v * v).sum(-1)
    t = np.clip(((p - a) * v).sum(-1) / vv, 0.0, 1.0)
    closest = a + t[..., None] * v
    return np.sqrt(((p - closest) ** 2).sum(-1)).min(axis=1)


def _paint_lane(mask_grid: np.ndarray, dist: np.ndarray, width: float):
    np.logical_or(mask_grid, dist <= width / 2.0, out=mask_grid)


def _box_mask(points: np.ndarray, center: np.ndarray, heading: float,
              length: float, width: float) -> np.ndarray:
    local = (points - center) @ rotation_matrix(heading)
    return (np.abs(local[:, 0]) <= length / 2.0) & (np.abs(local[:, 1]) <= width / 2.0)


def _lane_chain(scenario: Scenario, lane_id: int) -> list:
    """The lane plus all transitive successors, each visited once."""
    if lane_id not in scenario.lanes:
        raise UnknownLane(lane_id)
    chain, queue, seen = [], [lane_id], set()
    while queue:
        lid = queue.pop(0)
        if lid in seen:
            continue
        seen.add(lid)
        chain.append(lid)
        queue.extend(scenario.successors(lid))
    return chain


def rasterize(scenario: Scenario, actors, target: ActorState,
              config: RasterConfig) -> RasterImage:
    """Render the scene around ``target`` into a multi-channel grid.

    ``actors`` are the states of everything present at this tick; the
    target may or may not be among them (it is always drawn from
    ``target`` itself).
    """
    return _render(scenario, actors, target, config, lf_lane=None)


def rasterize_with_lane(scenario: Scenario, actors, target: ActorState,
                        lane_id: int, config: RasterConfig) -> RasterImage:
    """Same as :func:`rasterize` plus a layer painting the lane the
    target is assumed to follow (including its successor path)."""
    if lane_id not in scenario.lanes:
        raise UnknownLane(lane_id)
    cfg = config if config.include_lf_layer else RasterConfig(
        height_px=config.height_px, width_px=config.width_px,
        resolution=config.resolution, channels=config.channels,
        anchor=config.anchor, include_lf_layer=True)
    return _render(scenario, actors, target, cfg, lf_lane=lane_id)


def _render(scenario, actors, target, config, lf_lane):
    pix = _pixel_centers(config.height_px, config.width_px,
                         config.resolution, config.anchor)
    frame = target.frame
    shape = (config.height_px, config.width_px)
    # farthest pixel center from the actor origin (anchor is off-center)
    grid_radius = float(np.linalg.norm(pix, axis=1).max())
    planes = np.zeros((config.num_channels,) + shape, dtype=np.float32)

    surface = np.zeros(len(pix), dtype=bool)
    boundary = np.zeros(len(pix), dtype=bool)
    for lane in scenario.lanes.values():
        local = frame.to_local(lane.centerline)
        # conservative cull of lanes that cannot reach the grid
        d0 = _segment_distances(np.zeros((1, 2)), local)[0]
        if d0 - grid_radius > lane.width / 2.0 + config.resolution:
            continue
        dist = _segment_distances(pix, local)
        surface |= dist <= lane.width / 2.0
        boundary |= np.abs(dist - lane.width / 2.0) <= config.resolution / 2.0

    _set_plane(planes, config, "lane_surface", surface, shape)
    _set_plane(planes, config, "lane_boundary", boundary, shape)

    target_mask = _box_mask(pix, np.zeros(2), 0.0,
                            target.bbox_length, target.bbox_width)
    _set_plane(planes, config, "target_actor", target_mask, shape)

    others = np.zeros(len(pix), dtype=bool)
    for state in actors:
        if state.actor_id == target.actor_id and state.tick == target.tick:
            continue
        center = frame.to_local(state.position)
        if np.linalg.norm(center) > grid_radius + state.bbox_length:
            continue
        others |= _box_mask(pix, center, state.heading - target.heading,
                            state.bbox_length, state.bbox_width)
    _set_plane(planes, config, "other_actors", others, shape)

    if lf_lane is not None:
        follow = np.zeros(len(pix), dtype=bool)
        for lid in _lane_chain(scenario, lf_lane):
            lane = scenario.lanes[lid]
            local = frame.to_local(lane.centerline)
            dist = _segment_distances(pix, local)
            follow |= dist <= lane.width / 2.0
        _set_plane(planes, config, LANE_FOLLOW_CHANNEL, follow, shape)

    return RasterImage(data=planes, resolution=config.resolution,
                       frame=frame, channels=config.channels)


def _set_plane(planes, config, name, mask, shape):
    if name in config.channels:
        planes[config.channel_index(name)] = mask.reshape(shape)


def dump_ppm(raster: RasterImage, channel_triplet, path):
    """Write three channels as a binary (P6) PPM, value = round(255 * v)."""
    c, h, w = raster.data.shape
    for idx in channel_triplet:
        if not 0 <= idx < c:
            raise InvalidConfig(f"channel index {idx} out of range")
    rgb = np.stack([raster.data[i] for i in channel_triplet], axis=-1)
    payload = np.rint(255.0 * rgb).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)
