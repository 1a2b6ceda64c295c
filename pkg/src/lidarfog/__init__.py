"""Simulated LiDAR ranging in fog and a GP model of the visibility at which targets vanish."""

from .atmosphere import VisibilityTrace, dissipation_profile, extinction_from_visibility, transmission
from .gpr import FitConfig, GPModel, KernelParams, fit, predict
from .lidar import LidarConfig, received_power, simulate_reference, simulate_test
from .recording import DisappearSample, Recording, extract_roi, extract_samples
from .scene import SceneConfig, TargetPlacement, build_scene

__version__ = "0.1.0"

__all__ = [
    "DisappearSample", "FitConfig", "GPModel", "KernelParams", "LidarConfig", "Recording",
    "SceneConfig", "TargetPlacement", "VisibilityTrace", "build_scene", "dissipation_profile",
    "extinction_from_visibility", "extract_roi", "extract_samples", "fit", "predict",
    "received_power", "simulate_reference", "simulate_test", "transmission",
]
