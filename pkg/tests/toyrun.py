"""Seed-pinned toy training runs shared by the acceptance suite.

Runs are cached under ``.wvd_cache`` (override with WVD_CACHE) keyed by a hash of
their configuration, and checkpointed every ``CHUNK`` steps so an interrupted
run resumes on the same random stream.  ``python3 tests/toyrun.py`` builds both.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from wvd import diffusion, io
from wvd.model import Denoiser, DenoiserConfig
from wvd.train import TrainConfig, Trainer, build_pool

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("WVD_CACHE", ROOT / ".wvd_cache"))
CHUNK = 1000

JOINT = {
    "model": {"height": 32, "width": 32, "max_frames": 8, "patch_size": 4, "embed_dim": 128,
              "n_layers": 4, "n_heads": 4, "rgb_only": False},
    "train": {"seed": 0, "batch_size": 8, "lr": 3e-4, "betas": [0.99, 0.95], "ema_decay": 0.999},
    "steps": 16000,
    "pool": [10000, 1500],  # first seed, count; held-out scenes use seeds below 10000
    "n_frames": 6,
    "xyz_scale": diffusion.XYZ_SCALE,
}
RGB_ONLY = {**JOINT, "model": {**JOINT["model"], "rgb_only": True}, "steps": 1500}


def run_key(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def trained(cfg: dict, log=None):
    """(model, schedule, header) of the cached run, training it first when absent."""
    CACHE.mkdir(parents=True, exist_ok=True)
    key = run_key(cfg)
    final = CACHE / f"toy_{key}.ckpt"
    if not final.exists():
        _train(cfg, final, CACHE / f"toy_{key}.partial.pt", log or (lambda *a: None))
    model, header = io.load_checkpoint(final)
    return model, diffusion.make_schedule(header["T"], header["schedule"]), header


def _train(cfg, final, partial, log):
    torch.set_num_threads(1)
    t0 = time.time()
    first, count = cfg["pool"]
    pool = build_pool(range(first, first + count), cfg["n_frames"])
    log(f"pool {pool.shape} in {time.time() - t0:.0f}s")
    torch.manual_seed(cfg["train"]["seed"])
    model = Denoiser(DenoiserConfig(**cfg["model"]))
    trainer = Trainer(model, TrainConfig(**cfg["train"]))
    if partial.exists():
        state = torch.load(partial, weights_only=False)
        model.load_state_dict(state["model"])
        trainer.ema.load_state_dict(state["ema"])
        trainer.opt.load_state_dict(state["opt"])
        trainer.gen.set_state(state["gen"])
        trainer.step_count, trainer.losses = state["step"], state["losses"]
        log(f"resumed at step {trainer.step_count}")
    while trainer.step_count < cfg["steps"]:
        n = min(CHUNK, cfg["steps"] - trainer.step_count)
        trainer.fit(pool, n)
        torch.save({"model": model.state_dict(), "ema": trainer.ema.state_dict(),
                    "opt": trainer.opt.state_dict(), "gen": trainer.gen.get_state(),
                    "step": trainer.step_count, "losses": trainer.losses}, partial)
        log(f"step {trainer.step_count} loss {np.mean(trainer.losses[-n:]):.4f} {time.time() - t0:.0f}s")
    io.save_checkpoint(final, trainer.sampling_model(), trainer.cfg.schedule, trainer.cfg.T,
                       trainer.step_count, extra={"run": cfg, "losses": trainer.losses[::10],
                                                  "wall_time": time.time() - t0})
    partial.unlink()


if __name__ == "__main__":
    which = sys.argv[1:] or ["joint", "rgb"]
    for name in which:
        trained(JOINT if name == "joint" else RGB_ONLY, log=lambda m: print(name, m, flush=True))
