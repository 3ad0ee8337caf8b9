"""``wvd`` command line: data generation, training, sampling and the task pipelines.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from . import io
from .diffusion import SamplerConfig, latent_to_video, make_schedule, sample, ConditionMask
from .errors import ConfigError, WVDError
from .geometry import CameraIntrinsics, XyzImage
from .model import Denoiser, DenoiserConfig
from .pipelines import (ControlState, TaskReport, camera_controlled, digest, estimate_cameras,
                        mono_depth, prepare_control, progressive_generate, relative_targets,
                        video_depth)
from .postopt import OptimizerConfig, depth_metrics, solve_view
from .scene import random_video
from .train import TrainConfig, Trainer, build_pool


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seeded(cfg: dict, args, section: str) -> int:
    return int(args.seed) if args.seed is not None else int(cfg[section]["seed"])


def _sampler(cfg: dict, args) -> SamplerConfig:
    s = cfg["sample"]
    return SamplerConfig(n_steps=s["n_steps"], guidance_w=s["w"], guidance_k=s["k"],
                         langevin_steps=s["langevin_steps"], langevin_snr=s["langevin_snr"],
                         seed=_seeded(cfg, args, "sample"))


def _intrinsics(cfg: dict) -> CameraIntrinsics:
    t = cfg["trajectory"]
    return CameraIntrinsics.default(t["resolution"], t["resolution"], t["fov_scale"])


def _load_model(path):
    model, header = io.load_checkpoint(path)
    return model, make_schedule(header["T"], header["schedule"])


def _read_rgb(path) -> np.ndarray:
    return io.read_raster(path)[..., :3].astype(np.float64)


def _read_xyz(path) -> XyzImage:
    a = io.read_raster(path).astype(np.float64)
    valid = a[..., 3] > 0.5 if a.shape[-1] >= 4 else np.any(a[..., :3] != 0, axis=-1)
    return XyzImage(a[..., :3], valid)


def _video_rgbs(directory) -> list:
    files = sorted(Path(directory).glob("frame_*_rgb.wvdr"))
    if not files:
        raise io.FormatError(f"no frame_*_rgb.wvdr files in {directory}")
    return [_read_rgb(f) for f in files]


def _report(out: Path, report: TaskReport, t0: float) -> None:
    report.wall_time = time.time() - t0
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", report.to_dict())


# ---------------------------------------------------------------- subcommands
def cmd_gen_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seeded(cfg, args, "scene")
    K = _intrinsics(cfg)
    n_frames = cfg["trajectory"]["n_frames"]
    seeds = [seed * 100003 + i for i in range(cfg["scene"]["n_videos"])]
    for i, s in enumerate(seeds):
        r = random_video(s, n_frames, K, cfg["scene"]["density"])
        io.write_video(out / f"video_{i:04d}", r.video, r.depths)
    io.write_json(out / "manifest.json", {"seeds": seeds, "n_frames": n_frames,
                                          "resolution": cfg["trajectory"]["resolution"],
                                          "config": cfg})
    return 0


def _dataset_pool(path) -> np.ndarray:
    from .diffusion import video_to_latent
    dirs = sorted(p for p in Path(path).iterdir() if p.is_dir())
    return np.stack([video_to_latent(io.read_video(d)) for d in dirs])


def cmd_train(args, cfg):
    t = cfg["train"]
    seed = _seeded(cfg, args, "train")
    torch.manual_seed(seed)
    K = _intrinsics(cfg)
    if args.data:
        pool = _dataset_pool(args.data)
    else:
        pool = build_pool([seed * 100003 + i for i in range(cfg["scene"]["n_videos"])],
                          cfg["trajectory"]["n_frames"], K)
    mcfg = DenoiserConfig(height=K.height, width=K.width, max_frames=max(8, pool.shape[1]),
                          patch_size=t["patch_size"], embed_dim=t["embed_dim"], n_layers=t["n_layers"],
                          n_heads=t["n_heads"], rgb_only=t["rgb_only"])
    model = Denoiser(mcfg)
    tcfg = TrainConfig(lr=t["lr"], betas=(t["beta1"], t["beta2"]), weight_decay=t["weight_decay"],
                       batch_size=t["batch_size"], cond_drop=t["cond_drop"], T=t["T"],
                       schedule=t["schedule"], seed=seed, ema_decay=t["ema_decay"])
    trainer = Trainer(model, tcfg)
    steps = args.steps if args.steps is not None else t["steps"]
    trainer.fit(pool, steps, log=lambda s, l: print(f"step {s} loss {l:.5f}", file=sys.stderr))
    io.save_checkpoint(args.out, trainer.sampling_model(), tcfg.schedule, tcfg.T, trainer.step_count,
                       extra={"losses": trainer.losses[-100:]})
    return 0


def cmd_sample(args, cfg):
    model, schedule = _load_model(args.ckpt)
    scfg = _sampler(cfg, args)
    H, W = model.cfg.height, model.cfg.width
    lat = sample(model, schedule, scfg, ConditionMask.unconditional(args.n_frames), None,
                 shape=(args.n_frames, H, W, 6))
    video = latent_to_video(lat)
    io.write_video(args.out, video)
    return 0


def _gt_depth_metrics(report, pred, gt_path):
    if gt_path:
        gt = io.read_raster(gt_path)[..., 0].astype(np.float64)
        report.depth_metrics.append(depth_metrics(pred, gt, (gt > 0) & (pred > 0)))


def cmd_depth_mono(args, cfg):
    t0 = time.time()
    model, schedule = _load_model(args.ckpt)
    rgb = _read_rgb(args.rgb)
    depth, sol = mono_depth(model, schedule, rgb, _sampler(cfg, args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_raster(out / "depth.wvdr", depth.astype(np.float32))
    io.write_json(out / "camera.json", sol.to_dict())
    report = TaskReport("depth-mono", digest(rgb), _sampler(cfg, args).seed, residuals=[sol.final_residual])
    _gt_depth_metrics(report, depth, args.gt_depth)
    _report(out, report, t0)
    return 0


def cmd_depth_video(args, cfg):
    t0 = time.time()
    model, schedule = _load_model(args.ckpt)
    rgbs = _video_rgbs(args.video)
    scfg = _sampler(cfg, args)
    results, video = video_depth(model, schedule, rgbs, scfg, return_video=True)
    out = Path(args.out)
    io.write_video(out, video, np.stack([d for d, _ in results]).astype(np.float32))
    io.write_json(out / "solutions.json", [s.to_dict() for _, s in results])
    report = TaskReport("depth-video", digest(*rgbs), scfg.seed, residuals=[s.final_residual for _, s in results])
    gts = io.read_depths(args.video)
    if gts is not None:
        for (d, _), g in zip(results, gts):
            report.depth_metrics.append(depth_metrics(d, g, (g > 0) & (d > 0)))
    _report(out, report, t0)
    return 0


def cmd_est_cams(args, cfg):
    t0 = time.time()
    scfg = _sampler(cfg, args)
    gt_video = io.read_video(args.video)
    gt_cams = [fr.camera for fr in gt_video.frames] if all(fr.camera for fr in gt_video.frames) else None
    if args.gt_xyz:
        sols, errs = estimate_cameras(None, None, [], gt_cameras=gt_cams,
                                      xyz_override=[fr.xyz for fr in gt_video.frames])
        rgbs = [fr.rgb for fr in gt_video.frames]
    else:
        model, schedule = _load_model(args.ckpt)
        rgbs = _video_rgbs(args.video)
        sols, errs = estimate_cameras(model, schedule, rgbs, scfg, gt_cameras=gt_cams)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "solutions.json", [s.to_dict() for s in sols])
    report = TaskReport("est-cams", digest(*rgbs), scfg.seed, pose_errors=errs or [],
                        residuals=[s.final_residual for s in sols])
    _report(out, report, t0)
    return 0


def _targets(path, state: ControlState):
    spec = io.read_json(path)
    relative = False
    if isinstance(spec, dict):
        relative = bool(spec.get("relative", False))
        spec = spec["cameras"]
    cams = [io.camera_from_dict(c) for c in spec]
    if relative:
        return relative_targets(state, [E for _, E in cams], cams[0][0] if cams else None)
    return cams


def cmd_cam_control(args, cfg, progressive=False):
    t0 = time.time()
    model, schedule = _load_model(args.ckpt)
    rgb = _read_rgb(args.rgb)
    scfg = _sampler(cfg, args)
    state = prepare_control(model, schedule, rgb, scfg)
    targets = _targets(args.cameras, state)
    out = Path(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if progressive:
            video, sizes = progressive_generate(model, schedule, rgb, targets, args.window, scfg, state=state)
            extra = {"memory_sizes": sizes}
        else:
            video = camera_controlled(model, schedule, rgb, targets, scfg, state=state)
            extra = {}
    extra["warnings"] = [str(w.message) for w in caught]
    io.write_video(out, video)
    report = TaskReport("progressive" if progressive else "cam-control", digest(rgb), scfg.seed, extra=extra)
    _report(out, report, t0)
    return 0


def cmd_post_opt(args, cfg):
    t0 = time.time()
    xyz = _read_xyz(args.xyz)
    sol = solve_view(xyz, OptimizerConfig(max_iterations=args.iterations))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_raster(out / "depth.wvdr", sol.depth.astype(np.float32))
    io.write_json(out / "camera.json", sol.to_dict())
    report = TaskReport("post-opt", digest(xyz.data), 0, residuals=[sol.final_residual])
    _report(out, report, t0)
    return 0


def cmd_eval(args, cfg):
    pred = io.read_raster(args.pred)[..., 0].astype(np.float64)
    gt = io.read_raster(args.gt)[..., 0].astype(np.float64)
    if pred.shape != gt.shape:
        raise io.FormatError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    m = depth_metrics(pred, gt, (gt > 0) & (pred > 0), median_scale=not args.no_median_scale)
    report = TaskReport("eval", digest(pred, gt), 0, depth_metrics=[m])
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wvd", description="RGB+XYZ video diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "render a synthetic 6D video dataset")
    sp.add_argument("--out", required=True)
    sp = add("train", cmd_train, "train the denoiser")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--data", help="dataset directory written by gen-data")
    sp.add_argument("--steps", type=int)
    sp = add("sample", cmd_sample, "unconditional 6D video sample")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-frames", type=int, default=6)
    sp = add("depth-mono", cmd_depth_mono, "monocular depth of one RGB raster")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--rgb", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt-depth")
    sp = add("depth-video", cmd_depth_video, "video depth for a directory of RGB frames")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--out", required=True)
    sp = add("est-cams", cmd_est_cams, "camera estimation for a video directory")
    sp.add_argument("--ckpt")
    sp.add_argument("--video", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt-xyz", action="store_true", help="solve on the stored XYZ, skipping diffusion")
    for name, prog in (("cam-control", False), ("progressive", True)):
        sp = add(name, (lambda a, c, prog=prog: cmd_cam_control(a, c, prog)), f"{name} generation")
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--rgb", required=True)
        sp.add_argument("--cameras", required=True, help="JSON list of cameras")
        sp.add_argument("--out", required=True)
        if prog:
            sp.add_argument("--window", type=int, default=4)
    sp = add("post-opt", cmd_post_opt, "recover camera and depth from an XYZ raster")
    sp.add_argument("--xyz", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int, default=OptimizerConfig.max_iterations)
    sp = add("eval", cmd_eval, "depth metrics of a prediction raster against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out")
    sp.add_argument("--no-median-scale", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = io.load_config(args.config)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (WVDError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
