"""Unsupervised part segmentation and shape abstraction with repeatable deformable superquadrics."""

from .decoders import UnfreezeStage
from .fitter import FitConfig, FitResult, fit_batch, fit_shape, gradient_check, run_gradient_check
from .estimator import SuperquadricAbstraction
from .geometry import DsqParams, MirrorPlane
from .io import PointCloud, export_result, load_point_cloud
from .losses import LossConfig

__version__ = "0.1.0"

__all__ = [
    "DsqParams",
    "FitConfig",
    "FitResult",
    "LossConfig",
    "MirrorPlane",
    "PointCloud",
    "SuperquadricAbstraction",
    "UnfreezeStage",
    "export_result",
    "fit_batch",
    "fit_shape",
    "gradient_check",
    "load_point_cloud",
    "run_gradient_check",
]
