"""Shared test doubles and evaluation protocol for held-out synthetic scenes."""
import numpy as np
import torch

from wvd.diffusion import video_to_latent
from wvd.model import DenoiserConfig
from wvd.pipelines import camera_controlled, prepare_control, relative_targets
from wvd.postopt import OptimizerConfig, pose_error, solve_view
from wvd.scene import random_video

HELD_OUT = range(20)  # training pools draw from seeds >= 10000
ACCEPTANCE: dict = {}  # criterion -> (passed, detail), filled by test_acceptance.py


class OracleDenoiser(torch.nn.Module):
    """Predicts the exact noise for a known clean latent, so every x0 estimate is the truth."""

    rgb_only = False

    def __init__(self, latent, schedule):
        super().__init__()
        self.x0 = torch.as_tensor(latent)
        self.ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
        self.cfg = DenoiserConfig(max_frames=8)

    def forward(self, x, t, flags):
        a = self.ab[t].view(-1, 1, 1, 1, 1)
        x0 = self.x0[: x.shape[1]]
        return (x - a.sqrt() * x0) / (1 - a).sqrt()


def oracle_for(scene, schedule):
    return OracleDenoiser(video_to_latent(scene.video), schedule)


def control_errors(model, schedule, scene, cfg, opt=None):
    """Rotation errors (deg) of generated target frames against the requested cameras.

    Targets repeat the scene's ground-truth motion relative to frame 0, placed in
    the generated world at the solved conditioning camera with the true intrinsics.
    Generated frames are post-optimized with the requested intrinsics held fixed.
    """
    opt = opt or OptimizerConfig()
    rgb0 = scene.video.frames[0].rgb
    state = prepare_control(model, schedule, rgb0, cfg, opt)
    E0 = scene.cameras[0][1]
    rel = [E.compose(E0.inverse()) for _, E in scene.cameras[1:]]
    K = scene.cameras[0][0]
    targets = relative_targets(state, rel, K)
    video = camera_controlled(model, schedule, rgb0, targets, cfg, opt, state=state)
    errs = []
    for fr, (Kt, Et) in zip(video.frames[1:], targets):
        if not fr.xyz.valid.any():
            errs.append(180.0)
            continue
        errs.append(pose_error(solve_view(fr.xyz, opt, Kt).extrinsics, Et).rotation_deg)
    return errs, video, targets


def held_out(seed):
    return random_video(seed)
