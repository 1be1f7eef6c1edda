"""Plain-text run configuration: ``section.key = value`` lines.

Unknown keys, bad types and malformed lines are reported with their
line number.  Every knob has a default; ``dump_defaults`` renders the
full commented reference that ``--print-config`` prints.
"""

from __future__ import annotations


class ConfigError(ValueError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


# flat "section.key" -> default; the default's type fixes the value type
DEFAULTS = {
    # world geometry
    "scenario.kind": "t_intersection",      # t_intersection | straight_road
    "scenario.arm_length": 100.0,
    "scenario.lane_width": 3.5,
    "scenario.turn_radius": 8.0,
    "scenario.include_left": False,

    # scripted traffic for dataset generation
    "traffic.rollouts": 300,
    "traffic.ticks": 125,
    "traffic.speed": 10.0,
    "traffic.speed_sigma": 0.5,
    "traffic.branch_straight": 0.5,         # straight weight at the branch
    "traffic.decision_distance": 10.0,
    "traffic.start_min": 46.0,              # meters before lane end at tick 0
    "traffic.start_max": 58.0,
    "traffic.speed_targets": "",            # e.g. "8:0.5,12:0.5"
    "traffic.speed_change_after": 0.0,      # meters traveled before re-draw
    "traffic.background_actors": 0,

    # sample extraction
    "dataset.horizon": 60,
    "dataset.dt": 0.1,
    "dataset.seed": 7,

    # rasterization
    "raster.height": 64,
    "raster.width": 64,
    "raster.resolution": 0.5,
    "raster.anchor": 0.25,
    "raster.channels": "lane_surface,lane_boundary,target_actor,other_actors",
    "raster.lane_following": False,

    # network
    "model.conv": "8x3x2,16x3x2",           # filters x kernel x stride per layer
    "model.dense": "64",
    "model.modes": 2,
    "model.seed": 0,
    "model.mode_bias_spread": 0.5,

    # optimization
    "train.loss": "mtp-disp",               # stp | me | mtp-disp | mtp-angle | mdn
    "train.epochs": 5,
    "train.batch_size": 32,
    "train.learning_rate": 1e-3,
    "train.decay_factor": 0.9,
    "train.decay_interval": 20000,
    "train.alpha": 1.0,
    "train.angle_threshold_deg": 5.0,
    "train.val_fraction": 0.2,
    "train.seed": 0,

    # evaluation protocol
    "eval.threshold": 0.2,
    "eval.buckets": 10,
}


def _coerce(key: str, raw: str, line_no: int):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}", line_no)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}", line_no)
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}", line_no)
    return raw


def parse_config(text: str) -> dict:
    """Parse config text into a {section.key: value} dict over defaults."""
    values = dict(DEFAULTS)
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'section.key = value', got {line!r}",
                              line_no)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}", line_no)
        values[key] = _coerce(key, raw, line_no)
    return values


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_defaults() -> str:
    """The full default configuration, one section per block."""
    lines = ["# trajmodes configuration (all values are defaults)"]
    section = None
    for key, value in DEFAULTS.items():
        sec = key.split(".", 1)[0]
        if sec != section:
            lines.append("")
            section = sec
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def parse_speed_targets(raw: str):
    """Parse "speed:weight,speed:weight" into ((speed, weight), ...)."""
    raw = raw.strip()
    if not raw:
        return ()
    out = []
    for part in raw.split(","):
        speed, _, weight = part.partition(":")
        try:
            out.append((float(speed), float(weight)))
        except ValueError:
            raise ConfigError(f"bad speed target {part!r}")
    return tuple(out)


def parse_conv_spec(raw: str):
    """Parse "8x3x2,16x3x2" into ((8, 3, 2), (16, 3, 2))."""
    layers = []
    for part in raw.split(","):
        if not part.strip():
            continue
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise ConfigError(f"conv layer {part!r} needs filters x kernel x stride")
        try:
            layers.append(tuple(int(d) for d in dims))
        except ValueError:
            raise ConfigError(f"conv layer {part!r} must be integers")
    if not layers:
        raise ConfigError("model.conv must define at least one layer")
    return tuple(layers)


def parse_int_list(raw: str):
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}")
