"""Ellipsoidal forward reachable sets of a multirotor flying with a disturbance observer."""

from .config import ScenarioConfig, load_config
from .controller import CircularTrajectory, ControllerGains, adaptive_control, circular_reference
from .disturbance import DisturbanceModel, DisturbancePrediction, predict_bounds, sample_disturbance
from .ellipsoid import Ellipsoid, fuse_intersection, linear_map, min_trace_sum, project, support
from .errors import ConfigError, FrsError, NumericalFault, SoundnessViolation
from .frs import FrsSettings, FrsTube, Mode, run_tube
from .stability import build_certificate

__all__ = [
    "CircularTrajectory", "ConfigError", "ControllerGains", "DisturbanceModel", "DisturbancePrediction",
    "Ellipsoid", "FrsError", "FrsSettings", "FrsTube", "Mode", "NumericalFault", "ScenarioConfig",
    "SoundnessViolation", "adaptive_control", "build_certificate", "circular_reference", "fuse_intersection",
    "linear_map", "load_config", "min_trace_sum", "predict_bounds", "project", "run_tube", "sample_disturbance",
    "support",
]
__version__ = "0.1.0"
