"""Pinhole camera math, point-cloud normalization and XYZ-image rasterization.

Conventions: pixel (u, v) has its center at integer coordinates, u along the
image width and v along the height.  Cameras follow the usual computer-vision
frame (x right, y down, z forward).  Extrinsics map world to camera:
``p_cam = R @ p_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateCloud, NonPositiveDepth

MIN_DEPTH = 1e-9
MIN_EXTENT = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def default(cls, width: int = 32, height: int = 32, fov_scale: float = 1.0) -> "CameraIntrinsics":
        """Square pixels, principal point at the image center, focal = width * fov_scale."""
        f = float(width) * fov_scale
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def in_image(self) -> bool:
        return 0 <= self.cx < self.width and 0 <= self.cy < self.height

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) array of K^-1 [u, v, 1] for every pixel center."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraExtrinsics:
    """World-to-camera rigid transform stored as a unit quaternion (w, x, y, z) and translation."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion must have unit norm, got {n}")
        q = q / n
        # canonical hemisphere keeps serialization stable
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "CameraExtrinsics":
        q = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat(scalar_first=True)
        return cls(q, np.asarray(t, dtype=np.float64))

    @classmethod
    def look_at(cls, position, target, down=(0.0, 1.0, 0.0)) -> "CameraExtrinsics":
        """Camera at ``position`` whose optical axis passes through ``target``.

        World ``down`` maps to image-down; the default makes world -y point up.
        """
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(np.asarray(down, dtype=np.float64), fwd)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            # looking straight along the down axis, pick any perpendicular
            right = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
            nr = np.linalg.norm(right)
        right = right / nr
        cam_down = np.cross(fwd, right)
        R = np.stack([right, cam_down, fwd])
        return cls.from_rt(R, -R @ position)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion, scalar_first=True).as_matrix()

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "CameraExtrinsics":
        R = self.rotation
        return CameraExtrinsics.from_rt(R.T, -R.T @ self.translation)

    def compose(self, other: "CameraExtrinsics") -> "CameraExtrinsics":
        """Transform applying ``other`` first, then ``self``."""
        R1, R2 = self.rotation, other.rotation
        return CameraExtrinsics.from_rt(R1 @ R2, R1 @ other.translation + self.translation)

    def perturbed(self, rotvec, dt) -> "CameraExtrinsics":
        """Left-multiply a rotation increment (axis-angle) and add ``dt`` to the translation."""
        dR = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        return CameraExtrinsics.from_rt(dR @ self.rotation, self.translation + np.asarray(dt, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"quaternion": [float(x) for x in self.quaternion],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraExtrinsics":
        return cls(np.array(d["quaternion"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points must have the same length")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, None if self.colors is None else self.colors.copy())

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        if all(c.colors is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.colors for c in clouds]))
        return PointCloud(pts)


@dataclass(frozen=True)
class NormalizationTransform:
    """x_normalized = (x - center) * scale."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center

    def apply_to_camera(self, E: CameraExtrinsics) -> CameraExtrinsics:
        """Express a camera in normalized world units (depths scale by ``scale``)."""
        R = E.rotation
        return CameraExtrinsics.from_rt(R, self.scale * (R @ self.center + E.translation))


def normalize_pointcloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center the bounding box at the origin and scale its largest half-extent to 1."""
    pts = cloud.points
    if len(pts) == 0:
        raise DegenerateCloud("empty point cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = 0.5 * float(np.max(hi - lo))
    if half < MIN_EXTENT:
        raise DegenerateCloud(f"bounding box half-extent {half:g} is below {MIN_EXTENT:g}")
    transform = NormalizationTransform(0.5 * (lo + hi), 1.0 / half)
    out = transform.apply(pts)
    # snap the attained extreme to exactly +-1 so the postcondition is not at the mercy of rounding
    np.clip(out, -1.0, 1.0, out=out)
    return cloud.transformed(out), transform


def project_point(p_world, K: CameraIntrinsics, E: CameraExtrinsics) -> tuple[float, float, float]:
    p = E.apply(np.asarray(p_world, dtype=np.float64).reshape(1, 3))[0]
    depth = float(p[2])
    if depth <= MIN_DEPTH:
        raise BehindCamera(f"point depth {depth:g} is not in front of the camera")
    return (K.fx * p[0] / depth + K.cx, K.fy * p[1] / depth + K.cy, depth)


def project_points(points: np.ndarray, K: CameraIntrinsics, E: CameraExtrinsics):
    """Vectorized projection; returns u, v, depth (u, v are nan where depth <= MIN_DEPTH)."""
    p = E.apply(points)
    depth = p[:, 2]
    ok = depth > MIN_DEPTH
    safe = np.where(ok, depth, 1.0)
    u = np.where(ok, K.fx * p[:, 0] / safe + K.cx, np.nan)
    v = np.where(ok, K.fy * p[:, 1] / safe + K.cy, np.nan)
    return u, v, depth


@dataclass
class XyzImage:
    data: np.ndarray
    valid: np.ndarray
    depth_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        self.valid = np.array(self.valid, dtype=bool)
        if self.depth_buffer is None:
            self.depth_buffer = np.zeros(self.valid.shape)
        self.data[~self.valid] = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "XyzImage":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool))

    def points(self) -> np.ndarray:
        return self.data[self.valid]


def zbuffer(points: np.ndarray, K: CameraIntrinsics, E: CameraExtrinsics, splat_radius: int = 1):
    """Nearest-depth visibility over square splats.

    Returns (winner, depth): winner is the (H, W) index of the winning point or -1,
    depth is its camera-space depth (0 where empty).  Exact depth ties go to the
    lower point index.
    """
    H, W = K.height, K.width
    winner = np.full(H * W, -1, dtype=np.int64)
    depth_img = np.zeros(H * W)
    if len(points) == 0:
        return winner.reshape(H, W), depth_img.reshape(H, W)
    u, v, depth = project_points(points, K, E)
    ok = depth > MIN_DEPTH
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return winner.reshape(H, W), depth_img.reshape(H, W)
    px = np.floor(u[idx] + 0.5).astype(np.int64)
    py = np.floor(v[idx] + 0.5).astype(np.int64)
    r = int(splat_radius)
    offs = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(offs, offs)
    dx, dy = dx.ravel(), dy.ravel()
    cx = (px[:, None] + dx[None, :]).ravel()
    cy = (py[:, None] + dy[None, :]).ravel()
    cidx = np.repeat(idx, len(dx))
    inside = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
    cx, cy, cidx = cx[inside], cy[inside], cidx[inside]
    if len(cidx) == 0:
        return winner.reshape(H, W), depth_img.reshape(H, W)
    pix = cy * W + cx
    cdepth = depth[cidx]
    order = np.lexsort((cidx, cdepth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]
    winner[pix[sel]] = cidx[sel]
    depth_img[pix[sel]] = cdepth[sel]
    return winner.reshape(H, W), depth_img.reshape(H, W)


def rasterize_xyz(cloud_normalized: PointCloud, K: CameraIntrinsics, E: CameraExtrinsics,
                  splat_radius: int = 1) -> XyzImage:
    """Z-buffered splat of each point's own XYZ value into the image."""
    winner, depth = zbuffer(cloud_normalized.points, K, E, splat_radius)
    valid = winner >= 0
    data = np.zeros((K.height, K.width, 3))
    data[valid] = cloud_normalized.points[winner[valid]]
    return XyzImage(data, valid, depth)


def unproject_depth(depth: np.ndarray, valid: np.ndarray, K: CameraIntrinsics,
                    E: CameraExtrinsics) -> XyzImage:
    """World point R^T (d K^-1 [u, v, 1] - t) at every valid pixel."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if np.any(depth[valid] <= 0) or not np.all(np.isfinite(depth[valid])):
        raise NonPositiveDepth("depth must be positive and finite at valid pixels")
    rays = K.pixel_rays()
    cam = rays * np.where(valid, depth, 0.0)[..., None]
    R = E.rotation
    world = (cam - E.translation) @ R
    depth_buffer = np.where(valid, depth, 0.0)
    return XyzImage(world, valid, depth_buffer)


def reproject_points(cloud: PointCloud, K: CameraIntrinsics, E: CameraExtrinsics,
                     splat_radius: int = 1) -> tuple[XyzImage, np.ndarray]:
    """Partial XYZ image of ``cloud`` seen from a new camera plus its coverage mask."""
    img = rasterize_xyz(cloud, K, E, splat_radius)
    return img, img.valid.copy()


@dataclass
class Frame6D:
    rgb: np.ndarray
    xyz: XyzImage
    camera: Optional[tuple[CameraIntrinsics, CameraExtrinsics]] = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.shape[:2] != self.xyz.shape:
            raise ValueError(f"rgb {self.rgb.shape[:2]} and xyz {self.xyz.shape} differ in size")


@dataclass
class Video6D:
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a video needs at least one frame")
        shapes = {f.xyz.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"frames disagree on size: {shapes}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].xyz.shape

    def rgb_stack(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    def xyz_stack(self) -> np.ndarray:
        return np.stack([f.xyz.data for f in self.frames])

    def valid_stack(self) -> np.ndarray:
        return np.stack([f.xyz.valid for f in self.frames])

    def point_cloud(self) -> PointCloud:
        """Union of all valid XYZ pixels, colored by their RGB."""
        pts = [f.xyz.data[f.xyz.valid] for f in self.frames]
        cols = [f.rgb[f.xyz.valid] for f in self.frames]
        return PointCloud(np.concatenate(pts), np.concatenate(cols))
