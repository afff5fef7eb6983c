"""splatflow: dynamic Gaussian splatting with a learned deformation field,
for novel-view synthesis and dense 3D tracking of deformable scenes.
"""

from .core import (
    Camera,
    GaussianSet,
    TrajectorySet,
    covariance_from_rs,
    normalize_rotations,
    project_gaussian,
    project_gaussians,
)
from .field import DeformationField, DeformedState, FieldConfig, deform, encode, field_backward
from .rasterizer import RenderOutput, SplatInputs, rasterize, rasterize_backward
from .trackeval import (
    TrackQuery,
    TrackReport,
    compute_delta_avg,
    compute_mte,
    compute_survival,
    psnr,
    track_point,
)
from .trainer import (
    TrainConfig,
    Trainer,
    iso_loss,
    mask_loss,
    momentum_loss,
    render_view,
    select_dynamic,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DeformationField",
    "DeformedState",
    "FieldConfig",
    "GaussianSet",
    "RenderOutput",
    "SplatInputs",
    "TrackQuery",
    "TrackReport",
    "TrainConfig",
    "Trainer",
    "TrajectorySet",
    "compute_delta_avg",
    "compute_mte",
    "compute_survival",
    "covariance_from_rs",
    "deform",
    "encode",
    "field_backward",
    "iso_loss",
    "mask_loss",
    "momentum_loss",
    "normalize_rotations",
    "project_gaussian",
    "project_gaussians",
    "psnr",
    "rasterize",
    "rasterize_backward",
    "render_view",
    "select_dynamic",
    "track_point",
]
