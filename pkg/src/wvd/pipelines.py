"""Task pipelines built from the sampler and the re-projection solver.

All pipelines take a trained denoiser plus its noise schedule.  Observed inputs
are written back into the returned videos in their original precision, so the
output agrees with the observation bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .diffusion import (ConditionMask, NoiseSchedule, SamplerConfig, latent_to_video,
                        rgb_to_latent, sample, xyz_to_latent)
from .errors import InsufficientCorrespondences, NoValidPixels
from .geometry import (CameraExtrinsics, CameraIntrinsics, Frame6D, PointCloud, Video6D,
                       XyzImage, reproject_points)
from .postopt import (CameraSolution, OptimizerConfig, depth_metrics, pose_error, solve_view,
                      solve_views)

CAMERA_CONTROL_K = 0.5
REPROJECT_SPLAT = 1


class EmptyCoverage(UserWarning):
    """A target camera sees none of the memory points; its frame is generated freely."""


@dataclass
class TaskReport:
    task: str
    inputs_digest: str
    seed: int
    wall_time: float = 0.0
    depth_metrics: list = field(default_factory=list)
    pose_errors: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    FIELDS = ("task", "inputs_digest", "seed", "wall_time", "depth_metrics", "pose_errors",
              "residuals", "extra")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "inputs_digest": self.inputs_digest,
            "seed": int(self.seed),
            "wall_time": float(self.wall_time),
            "depth_metrics": [m.to_dict() for m in self.depth_metrics],
            "pose_errors": [p.to_dict() for p in self.pose_errors],
            "residuals": [float(r) for r in self.residuals],
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _check_rgb(rgb, shape=None) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {rgb.shape}")
    if shape is not None and rgb.shape[:2] != tuple(shape):
        raise ValueError(f"image size {rgb.shape[:2]} differs from {tuple(shape)}")
    return rgb


def _exact(video: Video6D, rgb_obs: dict, xyz_obs: dict) -> Video6D:
    """Overwrite observed RGB frames and observed XYZ pixels with the inputs."""
    frames = []
    for n, fr in enumerate(video.frames):
        rgb = rgb_obs.get(n, fr.rgb)
        data, valid = fr.xyz.data.copy(), fr.xyz.valid.copy()
        if n in xyz_obs:
            img, mask = xyz_obs[n]
            data[mask] = img.data[mask]
            valid[mask] = img.valid[mask]
        frames.append(Frame6D(np.array(rgb, dtype=np.float64), XyzImage(data, valid), fr.camera))
    return Video6D(frames)


def _observation(n_frames: int, shape, rgb_obs: dict, xyz_obs: dict, rgb_anchor=None, xyz_anchor=None):
    H, W = shape
    observed = np.zeros((n_frames, H, W, 6), dtype=np.float32)
    rgb_flags = np.zeros(n_frames, bool)
    xyz_flags = np.zeros(n_frames, bool)
    pixels = np.zeros((n_frames, H, W), bool)
    for n, rgb in rgb_obs.items():
        observed[n, ..., :3] = rgb_to_latent(rgb)
        rgb_flags[n] = True
    for n, (img, mask) in xyz_obs.items():
        observed[n, ..., 3:] = xyz_to_latent(img.data)
        xyz_flags[n] = True
        pixels[n] = mask
    cond = ConditionMask(rgb_flags, xyz_flags, pixels if xyz_obs else None, rgb_anchor, xyz_anchor)
    return cond, observed


def _generate(model, schedule, cfg, n_frames, shape, rgb_obs, xyz_obs, rgb_anchor=None, xyz_anchor=None,
              cameras=None) -> Video6D:
    cond, observed = _observation(n_frames, shape, rgb_obs, xyz_obs, rgb_anchor, xyz_anchor)
    lat = sample(model, schedule, cfg, cond, observed)
    return _exact(latent_to_video(lat, cameras), rgb_obs, xyz_obs)


def single_image_to_3d(model, schedule: NoiseSchedule, rgb0, n_frames: int = 6,
                       cfg: Optional[SamplerConfig] = None) -> tuple[Video6D, PointCloud]:
    """Generate a 6D video whose first RGB frame is ``rgb0``; return it with its point cloud."""
    cfg = cfg or SamplerConfig()
    rgb0 = _check_rgb(rgb0)
    video = _generate(model, schedule, cfg, n_frames, rgb0.shape[:2], {0: rgb0}, {}, rgb_anchor=0)
    return video, video.point_cloud()


def _solve(xyz: XyzImage, opt: Optional[OptimizerConfig], intrinsics=None) -> CameraSolution:
    if not xyz.valid.any():
        raise NoValidPixels("generated XYZ frame has no valid pixels")
    return solve_view(xyz, opt, intrinsics)


def mono_depth(model, schedule: NoiseSchedule, rgb0, cfg: Optional[SamplerConfig] = None,
               opt: Optional[OptimizerConfig] = None, n_frames: int = 6,
               intrinsics: Optional[CameraIntrinsics] = None):
    """Depth of ``rgb0`` from the post-optimized camera of its generated XYZ frame."""
    video, _ = single_image_to_3d(model, schedule, rgb0, n_frames, cfg)
    sol = _solve(video.frames[0].xyz, opt, intrinsics)
    return sol.depth, sol


def _video_depth(model, schedule, rgbs, cfg, opt, intrinsics=None):
    rgbs = [_check_rgb(r) for r in rgbs]
    if len(rgbs) < 2:
        raise ValueError("video depth needs at least two frames")
    shape = rgbs[0].shape[:2]
    rgbs = [_check_rgb(r, shape) for r in rgbs]
    video = _generate(model, schedule, cfg, len(rgbs), shape, dict(enumerate(rgbs)), {}, rgb_anchor=0)
    xyzs = [fr.xyz for fr in video.frames]
    if not all(x.valid.any() for x in xyzs):
        raise NoValidPixels("a generated XYZ frame has no valid pixels")
    sols = solve_views(xyzs, opt, shared_intrinsics=True, intrinsics=intrinsics)
    return video, sols


def video_depth(model, schedule: NoiseSchedule, rgbs: Sequence, cfg: Optional[SamplerConfig] = None,
                opt: Optional[OptimizerConfig] = None, intrinsics: Optional[CameraIntrinsics] = None,
                return_video: bool = False):
    """All RGB frames observed, XYZ generated, then every frame post-optimized.

    Returns a list of (depth, CameraSolution), plus the generated video when
    ``return_video`` is set.
    """
    video, sols = _video_depth(model, schedule, rgbs, cfg or SamplerConfig(), opt, intrinsics)
    out = [(s.depth, s) for s in sols]
    return (out, video) if return_video else out


def estimate_cameras(model, schedule: NoiseSchedule, rgbs: Sequence, cfg: Optional[SamplerConfig] = None,
                     opt: Optional[OptimizerConfig] = None, gt_cameras: Optional[Sequence] = None,
                     xyz_override: Optional[Sequence[XyzImage]] = None,
                     intrinsics: Optional[CameraIntrinsics] = None):
    """Camera per input frame, plus PoseError against ``gt_cameras`` when given.

    ``xyz_override`` skips diffusion and solves directly on supplied XYZ images
    (the ground-truth bypass).
    """
    if xyz_override is not None:
        sols = solve_views(list(xyz_override), opt, shared_intrinsics=True, intrinsics=intrinsics)
    elif len(rgbs) == 1:
        sols = [mono_depth(model, schedule, rgbs[0], cfg, opt, intrinsics=intrinsics)[1]]
    else:
        sols = _video_depth(model, schedule, rgbs, cfg or SamplerConfig(), opt, intrinsics)[1]
    if gt_cameras is None:
        return sols, None
    errs = [pose_error(s.extrinsics, (g[1] if isinstance(g, tuple) else g)) for s, g in zip(sols, gt_cameras)]
    return sols, errs


@dataclass
class ControlState:
    """Conditioning view of camera-controlled generation: its RGB, XYZ, camera
    and the spatial memory (point cloud) that targets are re-projected from."""

    rgb: np.ndarray
    xyz: XyzImage
    camera: tuple
    memory: PointCloud


def prepare_control(model, schedule: NoiseSchedule, rgb0, cfg: Optional[SamplerConfig] = None,
                    opt: Optional[OptimizerConfig] = None, n_frames: int = 6,
                    intrinsics: Optional[CameraIntrinsics] = None) -> ControlState:
    """Step one: lift ``rgb0`` to a generated cloud and locate its camera in that world."""
    video, cloud = single_image_to_3d(model, schedule, rgb0, n_frames, cfg)
    sol = _solve(video.frames[0].xyz, opt, intrinsics)
    return ControlState(np.asarray(rgb0, dtype=np.float64), video.frames[0].xyz,
                        (sol.intrinsics, sol.extrinsics), cloud)


def _controlled(model, schedule, cfg, state: ControlState, targets, splat_radius) -> Video6D:
    H, W = state.xyz.shape
    full = np.ones((H, W), dtype=bool)
    xyz_obs = {0: (state.xyz, full)}
    for i, (K, E) in enumerate(targets, start=1):
        img, cover = reproject_points(state.memory, K, E, splat_radius)
        if not cover.any():
            warnings.warn(f"target camera {i - 1} sees no memory points", EmptyCoverage, stacklevel=3)
            continue
        xyz_obs[i] = (img, cover)
    cams = [state.camera] + [tuple(t) for t in targets]
    gcfg = replace(cfg, guidance_k=CAMERA_CONTROL_K)
    return _generate(model, schedule, gcfg, 1 + len(targets), (H, W), {0: state.rgb}, xyz_obs,
                     rgb_anchor=0, xyz_anchor=0, cameras=cams)


def camera_controlled(model, schedule: NoiseSchedule, rgb0, target_cams: Sequence,
                      cfg: Optional[SamplerConfig] = None, opt: Optional[OptimizerConfig] = None,
                      state: Optional[ControlState] = None, splat_radius: int = REPROJECT_SPLAT) -> Video6D:
    """Generate views of ``rgb0`` from ``target_cams`` ((K, E) pairs in the generated world).

    The returned video starts with the conditioning view followed by one frame
    per target.  ``state`` lets callers reuse (or supply) the lifted scene, e.g.
    to express targets relative to ``state.camera``.
    """
    if not target_cams:
        raise ValueError("need at least one target camera")
    cfg = cfg or SamplerConfig()
    state = state or prepare_control(model, schedule, rgb0, cfg, opt)
    return _controlled(model, schedule, cfg, state, list(target_cams), splat_radius)


def relative_targets(state: ControlState, relative: Sequence[CameraExtrinsics],
                     intrinsics: Optional[CameraIntrinsics] = None) -> list:
    """Targets given as poses relative to the conditioning camera."""
    K = intrinsics or state.camera[0]
    return [(K, rel.compose(state.camera[1])) for rel in relative]


def progressive_generate(model, schedule: NoiseSchedule, rgb0, cams: Sequence, window: int,
                         cfg: Optional[SamplerConfig] = None, opt: Optional[OptimizerConfig] = None,
                         state: Optional[ControlState] = None, splat_radius: int = REPROJECT_SPLAT,
                         max_frames: Optional[int] = None, overlaps: Optional[list] = None):
    """Camera-controlled generation over sliding windows of ``cams`` (stride window // 2).

    Each window is conditioned on the union of all points generated so far.
    Returns the video (one frame per camera) and the memory size after each window.
    When ``overlaps`` is a list, it receives (camera index, mean XYZ disagreement)
    for every frame regenerated by a later window, over pixels valid in both.
    """
    cams = list(cams)
    if not cams:
        raise ValueError("need at least one camera")
    max_frames = max_frames or getattr(getattr(model, "cfg", None), "max_frames", None)
    if window < 1 or (max_frames is not None and window + 1 > max_frames):
        raise ValueError(f"window {window} does not fit the model's frame budget")
    cfg = cfg or SamplerConfig()
    state = state or prepare_control(model, schedule, rgb0, cfg, opt)
    stride = max(1, window // 2)
    frames: dict = {}
    sizes = [len(state.memory)]
    start = 0
    while True:
        idx = list(range(start, min(start + window, len(cams))))
        video = _controlled(model, schedule, cfg, state, [cams[i] for i in idx], splat_radius)
        new = [i for i in idx if i not in frames]
        if overlaps is not None:
            for i in idx:
                if i in frames:
                    a, b = frames[i].xyz, video.frames[1 + idx.index(i)].xyz
                    both = a.valid & b.valid
                    gap = float(np.linalg.norm(a.data - b.data, axis=-1)[both].mean()) if both.any() else np.nan
                    overlaps.append((i, gap))
        for i in new:
            frames[i] = video.frames[1 + idx.index(i)]
        if new:
            added = Video6D([frames[i] for i in new]).point_cloud()
            state = replace(state, memory=PointCloud.concat([state.memory, added]))
        sizes.append(len(state.memory))
        if idx[-1] == len(cams) - 1:
            break
        start += stride
    return Video6D([frames[i] for i in range(len(cams))]), sizes
