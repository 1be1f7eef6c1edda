"""Multimodal vehicle-trajectory prediction toolkit.

Synthetic bird's-eye-view scenes, a small CNN trained with
winner-take-all / mixture losses, physics baselines, and the matching
evaluation protocol (chosen-mode errors, maneuver slices, probability
calibration).
"""

from .baselines import propagate_state, propagation_predictor
from .estimators import (
    KinematicStatePredictor,
    MultimodalTrajectoryPredictor,
    samples_to_arrays,
)
from .evaluation import calibration, evaluate, filter_and_pick
from .geometry import (
    ActorFrame,
    ActorState,
    MultimodalPrediction,
    Trajectory,
    normalize_angle,
    to_actor_frame,
    trajectory_endpoint_bearing,
)
from .losses import (
    DistancePolicy,
    MtpConfig,
    angle_distance,
    displacement_loss,
    mdn_loss,
    me_loss,
    mtp_loss,
    select_best_mode,
)
from .network import ModelConfig, decode, forward, init_model, stp_config
from .raster import RasterConfig, RasterImage, rasterize, rasterize_with_lane
from .scene import (
    ActorPolicy,
    ActorSpec,
    LaneGeometry,
    Scenario,
    build_straight_road,
    build_t_intersection,
    simulate_actor,
)
from .dataset import Sample, extract_samples, read_dataset, write_dataset
from .training import TrainConfig, load_model, model_predictor, train

__version__ = "0.1.0"
