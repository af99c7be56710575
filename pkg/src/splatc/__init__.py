"""Voxel-based compaction of 3D Gaussian splat maps, with Patch-Grid initialization
and a CPU forward splatting renderer for checking that quality is preserved."""

from .core import (
    CameraPose,
    DegenerateCovarianceError,
    GaussianPrimitive,
    PinholeIntrinsics,
    SplatError,
    SplatMap,
    covariance_from_qs,
    qs_from_covariance,
    sh_to_color,
)
from .merge import MergeConfig, MergeReport, merge_pass
from .render import RenderedFrame, psnr, rasterize, ssim
from .splat_io import read_splat_ply, write_splat_ply

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "DegenerateCovarianceError",
    "GaussianPrimitive",
    "MergeConfig",
    "MergeReport",
    "PinholeIntrinsics",
    "RenderedFrame",
    "SplatError",
    "SplatMap",
    "covariance_from_qs",
    "merge_pass",
    "psnr",
    "qs_from_covariance",
    "rasterize",
    "read_splat_ply",
    "sh_to_color",
    "ssim",
    "write_splat_ply",
]
