"""The prediction network.

A small stack of strided convolutions reads the raster, the three
scalar state features are concatenated onto the flattened activations,
and a dense head emits, for each of M modes, 2H positions and one
probability logit: (2H+1)M outputs per actor.  The mixture-density head
adds 3H covariance parameters per mode, giving (5H+1)M outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, conv2d
from .geometry import MultimodalPrediction, Trajectory

REGRESSION = "regression"
MDN = "mdn"


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    in_height: int = 64
    in_width: int = 64
    conv_layers: tuple = ((8, 3, 2), (16, 3, 2))
    dense_units: tuple = (64,)
    num_modes: int = 2
    horizon: int = 60
    head: str = REGRESSION
    seed: int = 0
    mode_bias_spread: float = 0.5

    def __post_init__(self):
        if self.num_modes < 1:
            raise InvalidConfig("need at least one mode")
        if self.horizon < 1:
            raise InvalidConfig("horizon must be positive")
        if not self.dense_units:
            raise InvalidConfig("need at least one dense layer")
        if self.head not in (REGRESSION, MDN):
            raise InvalidConfig(f"unknown head {self.head!r}")
        object.__setattr__(self, "conv_layers",
                           tuple(tuple(int(v) for v in layer)
                                 for layer in self.conv_layers))
        object.__setattr__(self, "dense_units",
                           tuple(int(u) for u in self.dense_units))
        # fail early if the conv stack eats the whole raster
        self.conv_output_shape()

    @property
    def values_per_mode(self) -> int:
        per = 2 * self.horizon + 1
        if self.head == MDN:
            per += 3 * self.horizon
        return per

    @property
    def output_dim(self) -> int:
        return self.values_per_mode * self.num_modes

    def conv_output_shape(self):
        c, h, w = self.in_channels, self.in_height, self.in_width
        for filters, kernel, stride in self.conv_layers:
            h = (h - kernel) // stride + 1
            w = (w - kernel) // stride + 1
            if h < 1 or w < 1:
                raise InvalidConfig("conv stack reduces the raster below 1x1")
            c = filters
        return c, h, w

    # -- flat output layout: positions block, logits block, cov block --
    def position_slice(self):
        return slice(0, self.num_modes * 2 * self.horizon)

    def logit_slice(self):
        start = self.num_modes * 2 * self.horizon
        return slice(start, start + self.num_modes)

    def cov_slice(self):
        start = self.num_modes * (2 * self.horizon + 1)
        return slice(start, start + self.num_modes * 3 * self.horizon)


def stp_config(base: ModelConfig | None = None, **overrides) -> ModelConfig:
    """Single-trajectory predictor: the same network with M = 1.

    With one mode the winner-take-all and expectation losses both
    collapse to the plain displacement loss (the certain mode has
    probability 1, so the cross-entropy term is 0).
    """
    base = base or ModelConfig()
    return replace(base, num_modes=1, head=REGRESSION, **overrides)


def init_model(config: ModelConfig) -> dict:
    """He-uniform weights, zero biases, per-mode position-bias ramps.

    Each mode's position bias is a straight constant-velocity ramp to a
    random endpoint (forward reach up to ``mode_bias_spread`` meters,
    with some lateral scatter).  This breaks the symmetry between
    modes; with byte-identical mode heads a winner-take-all loss would
    never separate them, and the spread must reach into the span of
    plausible futures for same-direction (fast/slow) clusters to grab
    different modes from the first updates.
    """
    rng = np.random.default_rng(config.seed)

    def he_uniform(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    params = {}
    in_ch = config.in_channels
    for i, (filters, kernel, stride) in enumerate(config.conv_layers):
        params[f"conv{i}.w"] = Tensor(
            he_uniform((filters, in_ch, kernel, kernel), in_ch * kernel * kernel),
            requires_grad=True)
        params[f"conv{i}.b"] = Tensor(np.zeros(filters), requires_grad=True)
        in_ch = filters

    c, h, w = config.conv_output_shape()
    features = c * h * w + 3
    for i, units in enumerate(config.dense_units):
        params[f"dense{i}.w"] = Tensor(he_uniform((features, units), features),
                                       requires_grad=True)
        params[f"dense{i}.b"] = Tensor(np.zeros(units), requires_grad=True)
        features = units

    params["head.w"] = Tensor(he_uniform((features, config.output_dim), features),
                              requires_grad=True)
    head_bias = np.zeros(config.output_dim)
    spread = config.mode_bias_spread
    ramp = np.arange(1, config.horizon + 1) / config.horizon
    ramps = np.empty((config.num_modes, config.horizon, 2))
    for m in range(config.num_modes):
        end = np.array([rng.uniform(0.0, spread),
                        rng.uniform(-spread / 3.0, spread / 3.0)])
        ramps[m] = ramp[:, None] * end
    head_bias[config.position_slice()] = ramps.reshape(-1)
    params["head.b"] = Tensor(head_bias, requires_grad=True)
    return params


def forward_batch(params: dict, config: ModelConfig, rasters, features) -> Tensor:
    """Run the network on a batch; returns the flat (B, output_dim) tensor."""
    x = ad.as_tensor(rasters)
    feats = ad.as_tensor(features)
    if x.shape[1:] != (config.in_channels, config.in_height, config.in_width):
        raise ad.ShapeMismatch(
            f"raster batch {x.shape} does not match config "
            f"({config.in_channels}, {config.in_height}, {config.in_width})")
    if feats.shape != (x.shape[0], 3):
        raise ad.ShapeMismatch("state features must be (batch, 3)")
    for i, (_, _, stride) in enumerate(config.conv_layers):
        x = conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"],
                   stride=stride).relu()
    x = concat([x.flatten_rows(), feats], axis=1)
    for i in range(len(config.dense_units)):
        x = (x @ params[f"dense{i}.w"] + params[f"dense{i}.b"]).relu()
    return x @ params["head.w"] + params["head.b"]


def split_output(raw: Tensor, config: ModelConfig):
    """Views of the flat output: positions (B,M,H,2), logits (B,M),
    covariance parameters (B,M,H,3) or None."""
    b = raw.shape[0]
    m, h = config.num_modes, config.horizon
    positions = raw[:, config.position_slice()].reshape(b, m, h, 2)
    logits = raw[:, config.logit_slice()]
    cov = None
    if config.head == MDN:
        cov = raw[:, config.cov_slice()].reshape(b, m, h, 3)
    return positions, logits, cov


@dataclass(frozen=True)
class RawOutput:
    """One actor's flat network output plus the layout to read it."""

    values: np.ndarray
    config: ModelConfig

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape != (self.config.output_dim,):
            raise InvalidConfig(
                f"expected {self.config.output_dim} outputs, got {values.shape}")
        object.__setattr__(self, "values", values)

    def positions(self) -> np.ndarray:
        m, h = self.config.num_modes, self.config.horizon
        return self.values[self.config.position_slice()].reshape(m, h, 2)

    def logits(self) -> np.ndarray:
        return self.values[self.config.logit_slice()]

    def cov_params(self) -> np.ndarray | None:
        if self.config.head != MDN:
            return None
        m, h = self.config.num_modes, self.config.horizon
        return self.values[self.config.cov_slice()].reshape(m, h, 3)


def forward(params: dict, config: ModelConfig, raster, state_features) -> RawOutput:
    out = forward_batch(params, config,
                        np.asarray(raster, dtype=float)[None],
                        np.asarray(state_features, dtype=float)[None])
    return RawOutput(values=out.data[0], config=config)


def _softplus(x):
    return np.logaddexp(0.0, x)


def cholesky_covariance(cov_params: np.ndarray) -> np.ndarray:
    """Map (..., 3) raw values (a, b, c) to SPD matrices L @ L.T with
    L = [[softplus(a), 0], [c, softplus(b)]]."""
    a = _softplus(cov_params[..., 0])
    b = _softplus(cov_params[..., 1])
    c = cov_params[..., 2]
    cov = np.empty(cov_params.shape[:-1] + (2, 2))
    cov[..., 0, 0] = a * a
    cov[..., 0, 1] = a * c
    cov[..., 1, 0] = a * c
    cov[..., 1, 1] = c * c + b * b
    return cov


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def decode(raw: RawOutput, dt: float = 0.1) -> MultimodalPrediction:
    """Turn a flat output into trajectories, probabilities and (for the
    mixture-density head) per-point covariance matrices."""
    probs = softmax_probs(raw.logits())
    modes = tuple(Trajectory(pts, dt=dt) for pts in raw.positions())
    cov = raw.cov_params()
    covariances = cholesky_covariance(cov) if cov is not None else None
    return MultimodalPrediction(modes=modes, probabilities=probs,
                                covariances=covariances)


# -- checkpoint meta serialization ------------------------------------------

def config_to_meta(config: ModelConfig) -> dict:
    return {
        "in_channels": str(config.in_channels),
        "in_height": str(config.in_height),
        "in_width": str(config.in_width),
        "conv_layers": ",".join("x".join(map(str, l)) for l in config.conv_layers),
        "dense_units": ",".join(map(str, config.dense_units)),
        "num_modes": str(config.num_modes),
        "horizon": str(config.horizon),
        "head": config.head,
        "seed": str(config.seed),
        "mode_bias_spread": repr(config.mode_bias_spread),
    }


def config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig(
        in_channels=int(meta["in_channels"]),
        in_height=int(meta["in_height"]),
        in_width=int(meta["in_width"]),
        conv_layers=tuple(tuple(int(v) for v in l.split("x"))
                          for l in meta["conv_layers"].split(",") if l),
        dense_units=tuple(int(u) for u in meta["dense_units"].split(",") if u),
        num_modes=int(meta["num_modes"]),
        horizon=int(meta["horizon"]),
        head=meta["head"],
        seed=int(meta["seed"]),
        mode_bias_spread=float(meta["mode_bias_spread"]),
    )
