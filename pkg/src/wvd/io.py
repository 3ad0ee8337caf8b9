"""File formats: WVDR rasters, PLY clouds, checkpoints, manifests, run configs."""
from __future__ import annotations

import configparser
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import diffusion
from .errors import BadMagic, ConfigError, FormatError, TruncatedPayload, VersionUnsupported
from .geometry import CameraExtrinsics, CameraIntrinsics, Frame6D, PointCloud, Video6D, XyzImage
from .model import Denoiser, DenoiserConfig

# ---------------------------------------------------------------- WVDR raster
# magic | u16 version | u16 width | u16 height | u16 channels | u8 dtype | f32 LE payload
WVDR_MAGIC = b"WVDR"
WVDR_VERSION = 1
_WVDR_HEADER = struct.Struct("<4sHHHHB")


def encode_raster(data: np.ndarray) -> bytes:
    a = np.asarray(data)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"raster must be (H, W) or (H, W, C), got shape {a.shape}")
    h, w, c = a.shape
    if max(h, w, c) > 0xFFFF:
        raise ValueError("raster dimensions must fit in 16 bits")
    head = _WVDR_HEADER.pack(WVDR_MAGIC, WVDR_VERSION, w, h, c, 0)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_raster(buf: bytes) -> np.ndarray:
    """(H, W, C) float32 array from WVDR bytes."""
    if len(buf) < 4 or buf[:4] != WVDR_MAGIC:
        raise BadMagic("not a WVDR raster")
    if len(buf) < _WVDR_HEADER.size:
        raise TruncatedPayload("header is truncated")
    _, version, w, h, c, dtype = _WVDR_HEADER.unpack_from(buf)
    if version != WVDR_VERSION:
        raise VersionUnsupported(f"WVDR version {version} is not supported")
    if dtype != 0:
        raise FormatError(f"unknown dtype tag {dtype}")
    need = w * h * c * 4
    payload = buf[_WVDR_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def write_raster(path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_raster(data))


def read_raster(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes())


# ---------------------------------------------------------------- previews and clouds
def quantize(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * np.asarray(rgb, dtype=np.float64)), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    q = quantize(rgb)
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P6":
        raise BadMagic("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with float xyz and uchar rgb (white when the cloud has no colors)."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    cols = quantize(cloud.colors) if cloud.colors is not None else np.full((len(pts), 3), 255, np.uint8)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}" for p, c in zip(pts, cols)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise BadMagic("not a PLY file")
    n = next(int(l.split()[2]) for l in text if l.startswith("element vertex"))
    start = text.index("end_header") + 1
    rows = text[start:start + n]
    if len(rows) < n:
        raise TruncatedPayload(f"expected {n} vertices, found {len(rows)}")
    arr = np.array([r.split() for r in rows], dtype=np.float64).reshape(n, 6)
    return PointCloud(arr[:, :3], arr[:, 3:] / 255.0)


# ---------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"WVDCKPT1"


def save_checkpoint(path, model: Denoiser, schedule_kind: str, T: int, step: int, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    header = {
        "model": model.cfg.to_dict(),
        "schedule": schedule_kind,
        "T": int(T),
        "step": int(step),
        "xyz_scale": float(diffusion.XYZ_SCALE),
        "tensors": [[name, list(v.shape)] for name, v in state.items()],
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    blobs = b"".join(v.detach().cpu().numpy().astype("<f4").tobytes() for v in state.values())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + blobs)


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise BadMagic("not a WVD checkpoint")
    if len(buf) < 12:
        raise TruncatedPayload("checkpoint header is truncated")
    (n,) = struct.unpack_from("<I", buf, 8)
    if len(buf) < 12 + n:
        raise TruncatedPayload("checkpoint header is truncated")
    header = json.loads(buf[12:12 + n])
    if header.get("xyz_scale", diffusion.XYZ_SCALE) != diffusion.XYZ_SCALE:
        raise FormatError(f"checkpoint latent scale {header['xyz_scale']} differs from {diffusion.XYZ_SCALE}")
    model = Denoiser(DenoiserConfig(**header["model"]))
    state, off = {}, 12 + n
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(buf):
            raise TruncatedPayload(f"tensor {name} is truncated")
        state[name] = torch.from_numpy(np.frombuffer(buf[off:end], dtype="<f4").reshape(shape).copy())
        off = end
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after weights")
    model.load_state_dict(state)
    return model.eval(), header


# ---------------------------------------------------------------- json
def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def camera_to_dict(K: CameraIntrinsics, E: CameraExtrinsics) -> dict:
    return {"intrinsics": K.to_dict(), "extrinsics": E.to_dict()}


def camera_from_dict(d: dict) -> tuple[CameraIntrinsics, CameraExtrinsics]:
    return CameraIntrinsics.from_dict(d["intrinsics"]), CameraExtrinsics.from_dict(d["extrinsics"])


# ---------------------------------------------------------------- videos on disk
# <dir>/frame_XX_rgb.wvdr (H,W,3), frame_XX_xyz.wvdr (H,W,4: xyz + valid), cameras.json, cloud.ply
def write_video(directory, video: Video6D, depths: Optional[np.ndarray] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, fr in enumerate(video.frames):
        write_raster(d / f"frame_{i:02d}_rgb.wvdr", fr.rgb)
        xyz = np.concatenate([fr.xyz.data, fr.xyz.valid[..., None].astype(np.float32)], axis=-1)
        write_raster(d / f"frame_{i:02d}_xyz.wvdr", xyz)
        write_ppm(d / f"frame_{i:02d}_rgb.ppm", fr.rgb)
        if depths is not None:
            write_raster(d / f"frame_{i:02d}_depth.wvdr", depths[i])
        cams.append(None if fr.camera is None else camera_to_dict(*fr.camera))
    write_json(d / "cameras.json", cams)
    write_ply(d / "cloud.ply", video.point_cloud())


def read_video(directory) -> Video6D:
    d = Path(directory)
    cams = read_json(d / "cameras.json")
    frames = []
    for i, cam in enumerate(cams):
        rgb = read_raster(d / f"frame_{i:02d}_rgb.wvdr").astype(np.float64)
        xyz = read_raster(d / f"frame_{i:02d}_xyz.wvdr").astype(np.float64)
        frames.append(Frame6D(rgb, XyzImage(xyz[..., :3], xyz[..., 3] > 0.5),
                              None if cam is None else camera_from_dict(cam)))
    return Video6D(frames)


def read_depths(directory) -> Optional[np.ndarray]:
    d = Path(directory)
    files = sorted(d.glob("frame_*_depth.wvdr"))
    if not files:
        return None
    return np.stack([read_raster(f)[..., 0].astype(np.float64) for f in files])


# ---------------------------------------------------------------- run configuration
CONFIG_DEFAULTS = {
    "scene": {"seed": 0, "n_videos": 20, "density": 2000.0},
    "trajectory": {"n_frames": 6, "resolution": 32, "fov_scale": 1.0},
    "train": {"seed": 0, "steps": 500, "batch_size": 8, "lr": 3e-4, "beta1": 0.99, "beta2": 0.95,
              "weight_decay": 0.0, "T": 1000, "schedule": "cosine", "cond_drop": 0.1, "ema_decay": 0.0,
              "patch_size": 4, "embed_dim": 128, "n_layers": 4, "n_heads": 4, "rgb_only": False},
    "sample": {"seed": 0, "n_steps": 50, "w": 2.0, "k": 1.0, "langevin_steps": 1, "langevin_snr": 0.1},
}


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> dict:
    """INI text -> nested dict with every documented key filled in."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    out = {s: dict(v) for s, v in CONFIG_DEFAULTS.items()}
    for section in cp.sections():
        if section not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in CONFIG_DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][key] = _coerce(section, key, raw, CONFIG_DEFAULTS[section][key])
    return out


def load_config(path=None) -> dict:
    if path is None:
        return parse_config("")
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
