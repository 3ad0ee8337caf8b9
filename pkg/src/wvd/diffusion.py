"""Noise schedules, forward noising, guidance and the inpainting DDPM sampler.

Latents are (N frames, H, W, 6) arrays: RGB rescaled to [-1, 1] followed by the
XYZ channels.  The sampler is written against a plain ``eps_fn(x, t)`` so it can
be checked on closed-form targets as well as driven by the denoiser.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConditionWithoutObservation, ShapeMismatch
from .geometry import Frame6D, Video6D, XyzImage

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
RGB, XYZ = slice(0, 3), slice(3, 6)
# XYZ coordinates are multiplied by this factor in the latent so their spread is
# comparable to the RGB channels (identity encoder plus a fixed scale)
XYZ_SCALE = 2.5


@dataclass
class NoiseSchedule:
    T: int
    kind: str
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] == 1

    @property
    def betas(self) -> np.ndarray:
        """betas[t] for t = 1..T (index 0 is unused and zero)."""
        b = np.zeros(self.T + 1)
        b[1:] = 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]
        return b


def make_schedule(T: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        f = np.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        target = f / f[0]
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
        target = np.concatenate([[1.0], np.cumprod(1.0 - np.minimum(betas, MAX_BETA))])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = 1.0 - target[1:] / target[:-1]
    clipped = betas > MAX_BETA
    alpha_bar = target.copy()
    if np.any(clipped):
        # clip only where needed so untouched steps keep their closed-form value
        first = int(np.argmax(clipped))
        alpha_bar[first + 1:] = alpha_bar[first] * np.cumprod(1.0 - np.minimum(betas[first:], MAX_BETA))
    alpha_bar[0] = 1.0
    return NoiseSchedule(int(T), kind, alpha_bar)


def forward_noise(x0, t: int, noise, schedule: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; works for numpy arrays and tensors."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    if t == 0:
        return x0 * 1.0
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def cfg_combine(eps_rgb, eps_xyz, eps_uncond, w: float, k: float):
    """(1 + w) (k eps_rgb + (1 - k) eps_xyz) - w eps_uncond."""
    shapes = {tuple(np.shape(e)) for e in (eps_rgb, eps_xyz, eps_uncond)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"guidance inputs disagree in shape: {sorted(shapes)}")
    return (1.0 + w) * (k * eps_rgb + (1.0 - k) * eps_xyz) - w * eps_uncond


def rgb_to_latent(rgb):
    return 2.0 * rgb - 1.0


def latent_to_rgb(x):
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


def xyz_to_latent(xyz):
    return XYZ_SCALE * xyz


def latent_to_xyz(x):
    return np.clip(np.asarray(x, dtype=np.float64) / XYZ_SCALE, -1.0, 1.0)


def latent_bound() -> np.ndarray:
    """Per-channel magnitude bound of clean latents."""
    return np.array([1.0, 1.0, 1.0, XYZ_SCALE, XYZ_SCALE, XYZ_SCALE])


def video_to_latent(video: Video6D) -> np.ndarray:
    lat = np.concatenate([rgb_to_latent(video.rgb_stack()), xyz_to_latent(video.xyz_stack())], axis=-1)
    return lat.astype(np.float32)


# a generated pixel holds geometry only if it is neither background-dark nor at the sentinel
VALID_RGB_MIN = 0.1
VALID_XYZ_MIN = 0.03


def generated_validity(rgb: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    return (np.max(rgb, axis=-1) > VALID_RGB_MIN) & (np.linalg.norm(xyz, axis=-1) > VALID_XYZ_MIN)


def latent_to_video(latent: np.ndarray, cameras=None) -> Video6D:
    """Split a sampled latent into frames; XYZ is clipped to [-1, 1] and validity is
    decided by :func:`generated_validity`."""
    latent = np.asarray(latent, dtype=np.float64)
    frames = []
    for n in range(latent.shape[0]):
        rgb = latent_to_rgb(latent[n, ..., RGB])
        xyz = latent_to_xyz(latent[n, ..., XYZ])
        cam = None if cameras is None else cameras[n]
        frames.append(Frame6D(rgb, XyzImage(xyz, generated_validity(rgb, xyz)), cam))
    return Video6D(frames)


@dataclass
class ConditionMask:
    """Which content of each frame is observed.

    ``xyz_pixels`` restricts XYZ observations to a subset of pixels (projected
    points); rows for frames whose ``xyz_observed`` flag is false are ignored.
    ``rgb_anchor`` / ``xyz_anchor`` name the frame whose observation is handed
    to the denoiser noise-free in the guided branches.
    """

    rgb_observed: np.ndarray
    xyz_observed: np.ndarray
    xyz_pixels: Optional[np.ndarray] = None
    rgb_anchor: Optional[int] = None
    xyz_anchor: Optional[int] = None

    def __post_init__(self):
        self.rgb_observed = np.asarray(self.rgb_observed, dtype=bool).reshape(-1)
        self.xyz_observed = np.asarray(self.xyz_observed, dtype=bool).reshape(-1)
        if self.rgb_observed.shape != self.xyz_observed.shape:
            raise ShapeMismatch("rgb and xyz frame flags differ in length")
        if self.xyz_pixels is not None:
            self.xyz_pixels = np.asarray(self.xyz_pixels, dtype=bool)
            if self.xyz_pixels.shape[0] != self.n_frames:
                raise ShapeMismatch("xyz_pixels must have one mask per frame")
        for name, anchor, flags in (("rgb", self.rgb_anchor, self.rgb_observed),
                                    ("xyz", self.xyz_anchor, self.xyz_observed)):
            if anchor is not None and not flags[anchor]:
                raise ValueError(f"{name} anchor frame {anchor} is not observed")

    @property
    def n_frames(self) -> int:
        return len(self.rgb_observed)

    @classmethod
    def unconditional(cls, n_frames: int) -> "ConditionMask":
        return cls(np.zeros(n_frames, bool), np.zeros(n_frames, bool))

    def element_mask(self, height: int, width: int) -> np.ndarray:
        """(N, H, W, 6) boolean mask of observed latent entries."""
        m = np.zeros((self.n_frames, height, width, 6), dtype=bool)
        m[self.rgb_observed, :, :, RGB] = True
        xyz = np.broadcast_to(self.xyz_observed[:, None, None], (self.n_frames, height, width)).copy()
        if self.xyz_pixels is not None:
            xyz &= self.xyz_pixels
        m[..., XYZ] = xyz[..., None]
        return m

    def anchor_flags(self, height: int, width: int, which: str) -> np.ndarray:
        """(N, H, W, 2) flags for one guided branch ('rgb', 'xyz' or 'none')."""
        flags = np.zeros((self.n_frames, height, width, 2), dtype=np.float32)
        if which == "rgb" and self.rgb_anchor is not None:
            flags[self.rgb_anchor, :, :, 0] = 1.0
        if which == "xyz" and self.xyz_anchor is not None:
            n = self.xyz_anchor
            flags[n, :, :, 1] = 1.0 if self.xyz_pixels is None else self.xyz_pixels[n]
        return flags


@dataclass
class SamplerConfig:
    n_steps: int = 50
    guidance_w: float = 2.0
    guidance_k: float = 1.0
    langevin_steps: int = 1
    langevin_snr: float = 0.1
    seed: int = 0
    clip_denoised: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.guidance_w < 0 or not 0 <= self.guidance_k <= 1:
            raise ValueError("need guidance_w >= 0 and guidance_k in [0, 1]")
        if self.langevin_steps < 0 or not self.langevin_snr > 0:
            raise ValueError("need langevin_steps >= 0 and langevin_snr > 0")


def timesteps(schedule: NoiseSchedule, n_steps: int) -> list:
    """Descending visit order T = t_0 > t_1 > ... > t_{n-1} >= 1, followed by 0."""
    if n_steps > schedule.T:
        raise ValueError(f"n_steps={n_steps} exceeds T={schedule.T}")
    ts = np.unique(np.round(np.linspace(schedule.T, 1, n_steps)).astype(int))[::-1]
    return [int(t) for t in ts] + [0]


def sample_loop(eps_fn: Callable, schedule: NoiseSchedule, shape, n_steps: int,
                generator: torch.Generator, observed: Optional[torch.Tensor] = None,
                mask: Optional[torch.Tensor] = None, langevin_steps: int = 0,
                langevin_snr: float = 0.1, clip_denoised=False,
                dtype=torch.float32) -> torch.Tensor:
    """Ancestral DDPM over a respaced schedule with replacement-style inpainting.

    ``observed``/``mask`` (same shape as the sample) give the known entries; they are
    re-noised to the current level before every network call and written back
    exactly at t = 0.  After each ancestral step ``langevin_steps`` corrector
    updates are applied at the new noise level.  ``clip_denoised`` is False, True
    (clamp the x0 estimate to [-1, 1]) or a per-channel bound.
    """
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)
    bound = None
    if clip_denoised is not False and clip_denoised is not None:
        bound = torch.ones(()) if clip_denoised is True else torch.as_tensor(clip_denoised, dtype=dtype)

    def randn():
        return torch.randn(shape, generator=generator, dtype=dtype)

    def known(x, t):
        if mask is None:
            return x
        if t == 0:
            return torch.where(mask, observed, x)
        return torch.where(mask, forward_noise(observed, t, randn(), schedule), x)

    x = randn()
    ts = timesteps(schedule, n_steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x = known(x, t)
        eps = eps_fn(x, t)
        a_t, a_prev = float(ab[t]), float(ab[t_prev])
        beta = min(1.0 - a_t / a_prev, MAX_BETA)
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        if bound is not None:
            x0 = torch.maximum(torch.minimum(x0, bound), -bound)
        mean = (math.sqrt(a_prev) * beta / (1.0 - a_t)) * x0 \
            + (math.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)) * x
        var = beta * (1.0 - a_prev) / (1.0 - a_t)
        x = mean + math.sqrt(var) * randn() if t_prev > 0 else mean
        if t_prev > 0:
            for _ in range(langevin_steps):
                x = known(x, t_prev)
                x = langevin_correct(x, eps_fn(x, t_prev), a_prev, 1.0 - beta, langevin_snr, randn())
    return known(x, 0)


def langevin_correct(x, eps, alpha_bar_t: float, alpha_t: float, snr: float, z):
    """One predictor-corrector Langevin update with score = -eps / sqrt(1 - abar)."""
    score = -eps / math.sqrt(1.0 - alpha_bar_t)
    g = float(torch.linalg.vector_norm(score))
    n = float(torch.linalg.vector_norm(z))
    if g == 0.0:
        return x
    eta = 2.0 * alpha_t * (snr * n / g) ** 2
    return x + eta * score + math.sqrt(2.0 * eta) * z


def guided_eps_fn(model, cond: ConditionMask, observed: torch.Tensor, w: float, k: float):
    """Wrap the denoiser into eps(x, t) with dual classifier-free guidance.

    Branches are batched into one forward pass; a branch whose anchor is absent
    falls back to the unconditional prediction, and branches with zero weight
    are skipped.
    """
    N, H, W, _ = observed.shape
    elem = torch.as_tensor(cond.element_mask(H, W))
    branches = ["none"]
    if k > 0 and cond.rgb_anchor is not None:
        branches.append("rgb")
    if k < 1 and cond.xyz_anchor is not None:
        branches.append("xyz")
    flags = {b: torch.as_tensor(cond.anchor_flags(H, W, b)) for b in branches}

    def eps_fn(x, t):
        xs, fs = [], []
        for b in branches:
            xb = x
            if b == "rgb":
                sel = torch.zeros_like(elem)
                sel[cond.rgb_anchor, :, :, RGB] = True
                xb = torch.where(sel & elem, observed, x)
            elif b == "xyz":
                sel = torch.zeros_like(elem)
                sel[cond.xyz_anchor, :, :, XYZ] = True
                xb = torch.where(sel & elem, observed, x)
            xs.append(xb)
            fs.append(flags[b])
        tt = torch.full((len(branches),), t, dtype=torch.long)
        with torch.no_grad():
            out = model(torch.stack(xs), tt, torch.stack(fs))
        eps = dict(zip(branches, out))
        e_unc = eps["none"]
        if len(branches) == 1:
            return e_unc
        return cfg_combine(eps.get("rgb", e_unc), eps.get("xyz", e_unc), e_unc, w, k)

    return eps_fn


def sample(model, schedule: NoiseSchedule, cfg: SamplerConfig, cond: ConditionMask,
           observed: Optional[np.ndarray], shape=None) -> np.ndarray:
    """Draw one 6-channel latent video; observed entries come back bit-exact."""
    if observed is None:
        if cond.rgb_observed.any() or cond.xyz_observed.any():
            raise ConditionWithoutObservation("condition marks content observed but no observation given")
        if shape is None:
            raise ValueError("shape is required without an observation")
        observed = np.zeros(shape, dtype=np.float32)
    observed = np.asarray(observed, dtype=np.float32)
    N, H, W, C = observed.shape
    if C != 6 or N != cond.n_frames:
        raise ShapeMismatch(f"observation shape {observed.shape} does not match {cond.n_frames} frames x 6 channels")
    elem = cond.element_mask(H, W)
    if not np.all(np.isfinite(observed[elem])):
        raise ConditionWithoutObservation("observed entries must be finite")
    obs_t = torch.from_numpy(observed.copy())
    gen = torch.Generator().manual_seed(int(cfg.seed))
    eps_fn = guided_eps_fn(model, cond, obs_t, cfg.guidance_w, cfg.guidance_k)
    mask = torch.as_tensor(elem) if elem.any() else None
    clip = latent_bound() if cfg.clip_denoised else False
    x = sample_loop(eps_fn, schedule, observed.shape, cfg.n_steps, gen, obs_t, mask,
                    cfg.langevin_steps, cfg.langevin_snr, clip)
    out = x.numpy().astype(np.float32)
    if getattr(model, "rgb_only", False):
        out[..., XYZ] = 0.0
    out[elem] = observed[elem]
    return out
