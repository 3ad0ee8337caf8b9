"""Joint RGB + XYZ video diffusion on synthetic scenes, with re-projection camera recovery."""
from .diffusion import ConditionMask, NoiseSchedule, SamplerConfig, cfg_combine, forward_noise, make_schedule, sample
from .errors import WVDError
from .geometry import (CameraExtrinsics, CameraIntrinsics, Frame6D, PointCloud, Video6D, XyzImage,
                       normalize_pointcloud, project_point, rasterize_xyz, reproject_points, unproject_depth)
from .model import Denoiser, DenoiserConfig
from .postopt import OptimizerConfig, refine_reprojection, solve_view

__version__ = "0.1.0"
