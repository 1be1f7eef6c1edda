"""Config-driven dataset generation: scenario, rollouts, samples.

Each rollout is an independent episode on the shared map with a
randomized spawn point; optional background actors drive the same map
and appear in the other-actors raster channel.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, parse_conv_spec, parse_int_list, parse_speed_targets
from .dataset import extract_samples
from .network import MDN, ModelConfig, REGRESSION
from .raster import RasterConfig
from .scene import (
    APPROACH,
    LEFT_TURN,
    RIGHT_TURN,
    STRAIGHT,
    ActorPolicy,
    ActorSpec,
    Scenario,
    build_straight_road,
    build_t_intersection,
    simulate_actor,
)


def build_scenario(cfg: dict) -> Scenario:
    kind = cfg["scenario.kind"]
    if kind == "t_intersection":
        return build_t_intersection(cfg["scenario.arm_length"],
                                    cfg["scenario.lane_width"],
                                    turn_radius=cfg["scenario.turn_radius"],
                                    include_left=cfg["scenario.include_left"])
    if kind == "straight_road":
        return build_straight_road(cfg["scenario.arm_length"],
                                   cfg["scenario.lane_width"])
    raise ConfigError(f"unknown scenario.kind {kind!r}")


def raster_config(cfg: dict) -> RasterConfig:
    channels = tuple(n.strip() for n in cfg["raster.channels"].split(",")
                     if n.strip())
    return RasterConfig(height_px=cfg["raster.height"],
                        width_px=cfg["raster.width"],
                        resolution=cfg["raster.resolution"],
                        channels=channels,
                        anchor=cfg["raster.anchor"],
                        include_lf_layer=cfg["raster.lane_following"])


def model_config(cfg: dict, in_channels: int, in_height: int, in_width: int,
                 horizon: int) -> ModelConfig:
    loss = cfg["train.loss"]
    return ModelConfig(
        in_channels=in_channels, in_height=in_height, in_width=in_width,
        conv_layers=parse_conv_spec(cfg["model.conv"]),
        dense_units=parse_int_list(cfg["model.dense"]),
        num_modes=1 if loss == "stp" else cfg["model.modes"],
        horizon=horizon,
        head=MDN if loss == "mdn" else REGRESSION,
        seed=cfg["model.seed"],
        mode_bias_spread=cfg["model.mode_bias_spread"])


def _branch_weights(scenario: Scenario, lane_id: int, straight_weight: float):
    succs = scenario.successors(lane_id)
    if len(succs) < 2:
        return None
    weights = {}
    turns = [s for s in succs if s != STRAIGHT]
    for s in succs:
        if s == STRAIGHT:
            weights[s] = straight_weight
        else:
            weights[s] = (1.0 - straight_weight) / len(turns)
    return weights


def target_policy(cfg: dict, scenario: Scenario, start_lane: int) -> ActorPolicy:
    speed_targets = parse_speed_targets(cfg["traffic.speed_targets"])
    change_after = cfg["traffic.speed_change_after"]
    return ActorPolicy(
        speed=cfg["traffic.speed"],
        speed_sigma=cfg["traffic.speed_sigma"],
        branch_weights=_branch_weights(scenario, start_lane,
                                       cfg["traffic.branch_straight"]),
        decision_distance=cfg["traffic.decision_distance"],
        speed_targets=speed_targets,
        speed_change_after=change_after if speed_targets else float("inf"))


def generate_samples(cfg: dict, threads: int = 1):
    """All samples for a config; returns (samples, summary dict).

    Episodes are pure functions of (config, seed, episode index), so a
    thread pool only changes wall time, never the result.
    """
    scenario = build_scenario(cfg)
    rcfg = raster_config(cfg)
    seed = cfg["dataset.seed"]
    horizon = cfg["dataset.horizon"]
    dt = cfg["dataset.dt"]
    start_lane = APPROACH if cfg["scenario.kind"] == "t_intersection" else 0
    lane_length = scenario.lanes[start_lane].length
    policy = target_policy(cfg, scenario, start_lane)
    n_background = cfg["traffic.background_actors"]
    n_episodes = cfg["traffic.rollouts"]

    # all spawn randomness is drawn up front so episodes stay independent
    layout_rng = np.random.default_rng((seed, 1))
    offsets = [max(lane_length - layout_rng.uniform(cfg["traffic.start_min"],
                                                    cfg["traffic.start_max"]), 0.0)
               for _ in range(n_episodes)]
    spawns = [[layout_rng.uniform(0.0, lane_length * 0.3)
               for _ in range(n_background)] for _ in range(n_episodes)]

    def episode(i: int):
        rollouts = [simulate_actor(
            scenario,
            ActorSpec(actor_id=(n_background + 1) * i, lane_id=start_lane,
                      start_offset=offsets[i], policy=policy),
            seed=seed, num_ticks=cfg["traffic.ticks"], dt=dt)]
        for j, spawn in enumerate(spawns[i]):
            rollouts.append(simulate_actor(
                scenario,
                ActorSpec(actor_id=(n_background + 1) * i + 1 + j,
                          lane_id=start_lane, start_offset=spawn,
                          policy=policy),
                seed=seed, num_ticks=cfg["traffic.ticks"], dt=dt))
        target = rollouts[0]
        return target.route, extract_samples(scenario, rollouts, horizon, dt,
                                             rcfg, targets=[target])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(episode, range(n_episodes)))
    else:
        results = [episode(i) for i in range(n_episodes)]

    samples = []
    routes = Counter()
    for route, episode_samples in results:
        routes[tuple(route)] += 1
        samples.extend(episode_samples)

    labels = Counter(s.maneuver_label for s in samples)
    straight_rollouts = sum(c for route, c in routes.items()
                            if STRAIGHT in route)
    turn_rollouts = sum(c for route, c in routes.items()
                        if RIGHT_TURN in route or LEFT_TURN in route)
    summary = {
        "count": len(samples),
        "labels": dict(sorted(labels.items())),
        "straight_rollouts": straight_rollouts,
        "turn_rollouts": turn_rollouts,
    }
    return samples, summary
