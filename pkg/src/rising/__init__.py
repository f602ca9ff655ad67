"""Sparse-view CT reconstruction: early-stopped SGP plus a learned completion network."""

from .geometry import GridSpec, ScanGeometry, protocol_geometry
from .metrics import MetricsReport, relative_error, rmse, ssim
from .model import RISING
from .nn import NetworkSpec, ResUNetRegressor, TrainConfig
from .phantom import PhantomSpec, generate_phantom
from .projector import SiddonProjector, back_project, forward_project, simulate_sinogram
from .solver import SGPReconstructor, SolverConfig, sgp_solve

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "MetricsReport",
    "NetworkSpec",
    "PhantomSpec",
    "RISING",
    "ResUNetRegressor",
    "SGPReconstructor",
    "ScanGeometry",
    "SiddonProjector",
    "SolverConfig",
    "TrainConfig",
    "back_project",
    "forward_project",
    "generate_phantom",
    "protocol_geometry",
    "relative_error",
    "rmse",
    "sgp_solve",
    "simulate_sinogram",
    "ssim",
]
