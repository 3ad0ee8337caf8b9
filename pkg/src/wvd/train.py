"""Denoiser training: conditioning-frame selection, masked eps loss, seeded loop."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, make_schedule, video_to_latent
from .errors import EmptyBatch, ShapeMismatch
from .geometry import Video6D
from .model import Denoiser, DenoiserConfig
from .scene import random_video

DEFAULT_LR = 3e-4
DEFAULT_BETAS = (0.99, 0.95)
COND_DROP = 0.1


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    betas: tuple = DEFAULT_BETAS
    weight_decay: float = 0.0
    batch_size: int = 8
    cond_drop: float = COND_DROP
    T: int = 1000
    schedule: str = "cosine"
    seed: int = 0
    ema_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.cond_drop <= 1:
            raise ValueError("cond_drop must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def choose_conditioning(n_frames: int, gen: torch.Generator, drop: float, rgb_only: bool = False):
    """(frame, channel_group) with group 0 = RGB, 1 = XYZ, or None when dropped."""
    if torch.rand((), generator=gen).item() < drop:
        return None
    frame = int(torch.randint(n_frames, (), generator=gen))
    group = int(torch.randint(2, (), generator=gen))
    if rgb_only:
        group = 0
    return frame, group


def conditioning_tensors(shape, conds: Sequence):
    """Per-sample (B,N,H,W,6) mask of clean entries and (B,N,H,W,2) flags."""
    B, N, H, W, C = shape
    clean = torch.zeros(shape, dtype=torch.bool)
    flags = torch.zeros((B, N, H, W, 2))
    for b, c in enumerate(conds):
        if c is None:
            continue
        n, g = c
        clean[b, n, :, :, 3 * g:3 * g + 3] = True
        flags[b, n, :, :, g] = 1.0
    return clean, flags


def compute_loss(model: Denoiser, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                 schedule: NoiseSchedule, clean: Optional[torch.Tensor] = None,
                 flags: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared eps error over the entries that are not conditioning.

    Conditioning entries receive no noise (x_t = x0 there) and are excluded from
    the average; the network sees them flagged.
    """
    if x0.shape != noise.shape:
        raise ShapeMismatch("x0 and noise differ in shape")
    if clean is None:
        clean = torch.zeros_like(x0, dtype=torch.bool)
    if flags is None:
        flags = torch.zeros(x0.shape[:-1] + (2,))
    if model.rgb_only:
        x0 = torch.cat([x0[..., :3], torch.zeros_like(x0[..., 3:])], dim=-1)
        clean = clean.clone()
        clean[..., 3:] = True  # xyz carries no target in the rgb-only ablation
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t].view(-1, 1, 1, 1, 1)
    noise = torch.where(clean, torch.zeros_like(noise), noise)
    xt = torch.where(clean, x0, ab.sqrt() * x0 + (1 - ab).sqrt() * noise)
    err = (model(xt, t, flags) - noise) ** 2
    weight = (~clean).to(err.dtype)
    return (err * weight).sum() / weight.sum().clamp_min(1.0)


def build_pool(seeds: Sequence[int], n_frames: int = 6, intrinsics=None) -> np.ndarray:
    """Stack of training latents (V, N, H, W, 6) rendered from random scenes."""
    lats = [video_to_latent(random_video(int(s), n_frames, intrinsics).video) for s in seeds]
    if not lats:
        raise EmptyBatch("no videos to build a pool from")
    return np.stack(lats)


class Trainer:
    """Seeded sequential training loop; the same seed and data give identical weights."""

    def __init__(self, model: Denoiser, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.schedule = make_schedule(cfg.T, cfg.schedule)
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                                     weight_decay=cfg.weight_decay)
        self.gen = torch.Generator().manual_seed(int(cfg.seed))
        self.ema = copy.deepcopy(model).eval() if cfg.ema_decay > 0 else None
        if self.ema is not None:
            self.ema.requires_grad_(False)
        self.step_count = 0
        self.losses: list = []

    def train_step(self, batch) -> float:
        """One update on a batch of videos ((B,N,H,W,6) latents or Video6D list)."""
        if isinstance(batch, (list, tuple)):
            if not batch:
                raise EmptyBatch("empty batch")
            if isinstance(batch[0], Video6D):
                batch = np.stack([video_to_latent(v) for v in batch])
        x0 = torch.as_tensor(np.asarray(batch, dtype=np.float32))
        if x0.ndim != 5 or x0.shape[0] == 0:
            raise EmptyBatch(f"batch must be a non-empty (B,N,H,W,6) stack, got {tuple(x0.shape)}")
        B, N = x0.shape[:2]
        g = self.gen
        t = torch.randint(1, self.cfg.T + 1, (B,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        conds = [choose_conditioning(N, g, self.cfg.cond_drop, self.model.rgb_only) for _ in range(B)]
        clean, flags = conditioning_tensors(x0.shape, conds)
        self.model.train()
        loss = compute_loss(self.model, x0, t, noise, self.schedule, clean, flags)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        if self.ema is not None:
            with torch.no_grad():
                d = self.cfg.ema_decay
                for pe, p in zip(self.ema.parameters(), self.model.parameters()):
                    pe.mul_(d).add_(p, alpha=1 - d)
        self.step_count += 1
        val = float(loss.detach())
        self.losses.append(val)
        return val

    def fit(self, pool: np.ndarray, n_steps: int, log: Optional[Callable] = None, log_every: int = 100):
        """Draw batches from ``pool`` with the trainer's generator and run ``n_steps`` updates."""
        if len(pool) == 0:
            raise EmptyBatch("empty training pool")
        for _ in range(n_steps):
            idx = torch.randint(len(pool), (self.cfg.batch_size,), generator=self.gen).numpy()
            loss = self.train_step(pool[idx])
            if log is not None and self.step_count % log_every == 0:
                recent = self.losses[-log_every:]
                log(self.step_count, float(np.mean(recent)))
        return self.losses

    def sampling_model(self) -> Denoiser:
        return (self.ema if self.ema is not None else self.model).eval()


def smoothed(losses: Sequence[float], window: int = 50) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    window = max(1, min(window, len(x)))
    return np.convolve(x, np.ones(window) / window, mode="valid")


def train_step(model: Denoiser, batch, trainer: Optional[Trainer] = None, cfg: Optional[TrainConfig] = None):
    """Functional form: returns (model, loss) after one update."""
    trainer = trainer or Trainer(model, cfg or TrainConfig())
    return model, trainer.train_step(batch)
