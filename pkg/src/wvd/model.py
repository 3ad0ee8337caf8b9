"""Toy diffusion transformer over 6-channel multi-frame latents.

Each frame is cut into p x p patches; the patches of all frames form one token
sequence, so every attention layer mixes information across views.  Timestep,
patch position, frame index and the per-pixel observation flags enter as
additive embeddings.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch

LATENT_CHANNELS = 6
FLAG_CHANNELS = 2


@dataclass
class DenoiserConfig:
    height: int = 32
    width: int = 32
    max_frames: int = 8
    patch_size: int = 4
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    rgb_only: bool = False

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(f"{self.height}x{self.width} is not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(B, L, D))
        return x + self.mlp(self.norm2(x))


class Denoiser(nn.Module):
    """eps-prediction network: (x_t, t, flags) -> eps_hat, all shaped (B, N, H, W, C)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        p, D = cfg.patch_size, cfg.embed_dim
        self.grid = (cfg.height // p, cfg.width // p)
        n_patches = self.grid[0] * self.grid[1]
        self.patch_embed = nn.Linear(p * p * LATENT_CHANNELS, D)
        self.flag_embed = nn.Linear(p * p * FLAG_CHANNELS, D, bias=False)
        self.pos_embed = nn.Parameter(torch.randn(n_patches, D) * 0.02)
        self.frame_embed = nn.Parameter(torch.randn(cfg.max_frames, D) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList([Block(D, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers)])
        self.norm_out = nn.LayerNorm(D)
        self.out = nn.Linear(D, p * p * LATENT_CHANNELS)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.use_frame_embed = True

    @property
    def rgb_only(self) -> bool:
        return self.cfg.rgb_only

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _patchify(self, x):
        B, N, H, W, C = x.shape
        p = self.cfg.patch_size
        x = x.reshape(B, N, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, N, (H // p) * (W // p), p * p * C)

    def _unpatchify(self, x, N):
        B = x.shape[0]
        p, C = self.cfg.patch_size, LATENT_CHANNELS
        gh, gw = self.grid
        x = x.reshape(B, N, gh, gw, p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, N, gh * p, gw * p, C)

    def forward(self, x, t, flags):
        B, N, H, W, C = x.shape
        if C != LATENT_CHANNELS or (H, W) != (self.cfg.height, self.cfg.width):
            raise ShapeMismatch(f"expected (B, N, {self.cfg.height}, {self.cfg.width}, 6), got {tuple(x.shape)}")
        if N > self.cfg.max_frames:
            raise ShapeMismatch(f"{N} frames exceeds the model's limit of {self.cfg.max_frames}")
        if flags.shape != (B, N, H, W, FLAG_CHANNELS):
            raise ShapeMismatch(f"flags shape {tuple(flags.shape)} does not match input {tuple(x.shape)}")
        if self.rgb_only:
            x = torch.cat([x[..., :3], torch.zeros_like(x[..., 3:])], dim=-1)
        dtype = self.patch_embed.weight.dtype
        x, flags = x.to(dtype), flags.to(dtype)
        h = self.patch_embed(self._patchify(x)) + self.flag_embed(self._patchify(flags))
        h = h + self.pos_embed[None, None]
        if self.use_frame_embed:
            h = h + self.frame_embed[:N][None, :, None]
        temb = self.time_mlp(timestep_embedding(torch.as_tensor(t).reshape(-1), self.cfg.embed_dim).to(dtype))
        h = h + temb[:, None, None]
        h = h.reshape(B, -1, self.cfg.embed_dim)
        for blk in self.blocks:
            h = blk(h)
        h = self.out(self.norm_out(h)).reshape(B, N, -1, self.cfg.patch_size ** 2 * LATENT_CHANNELS)
        return self._unpatchify(h, N)
