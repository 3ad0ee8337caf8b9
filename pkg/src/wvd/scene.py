"""Procedural scenes, camera trajectories and ground-truth 6D video rendering.

All randomness comes from Philox streams keyed by (seed, primitive index), so a
primitive's samples do not depend on how many other primitives exist or on the
order they are generated in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import EmptyScene
from .geometry import (CameraExtrinsics, CameraIntrinsics, Frame6D, NormalizationTransform,
                       PointCloud, Video6D, XyzImage, normalize_pointcloud, unproject_depth, zbuffer)

KINDS = ("box", "sphere", "plane")
TEXTURES = ("checker", "gradient", "noise")
TRAJECTORIES = ("orbit", "dolly", "arc")

DEFAULT_DENSITY = 2000.0
GROUND_HALF = 2.25
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class ScenePrimitive:
    """``size`` holds the three half extents of a box, the radius of a sphere, or the
    (x, z) half extents of a horizontal plane."""

    kind: str
    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray
    texture_id: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        expected = {"box": 3, "sphere": 1, "plane": 2}[self.kind]
        if self.size.shape != (expected,):
            raise ValueError(f"{self.kind} expects {expected} size values, got {self.size.shape}")
        if np.any(self.size <= 0):
            raise ValueError("primitive sizes must be positive")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if self.texture_id not in range(len(TEXTURES)):
            raise ValueError(f"texture_id must be in 0..{len(TEXTURES) - 1}")

    @property
    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * math.pi * float(self.size[0]) ** 2
        if self.kind == "plane":
            return 4.0 * float(self.size[0] * self.size[1])
        a, b, c = self.size
        return float(8.0 * (a * b + b * c + a * c))

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Strict interior test (planes have no interior)."""
        d = np.asarray(points) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=1) < self.size[0] - margin
        if self.kind == "box":
            return np.all(np.abs(d) < self.size - margin, axis=1)
        return np.zeros(len(d), dtype=bool)


@dataclass
class SceneSpec:
    seed: int
    primitives: list
    points_per_unit_area: float = DEFAULT_DENSITY

    def __post_init__(self):
        if not self.points_per_unit_area > 0:
            raise ValueError("points_per_unit_area must be positive")


@dataclass
class TrajectorySpec:
    """Camera path around ``look_at``.

    orbit: constant radius and elevation, azimuth sweeps ``angular_span``.
    arc:   like orbit but the elevation also rises by half the span.
    dolly: fixed direction, distance shrinks from ``radius`` by ``dolly_fraction``.
    """

    kind: str = "orbit"
    n_frames: int = 6
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 2.5
    angular_span: float = 0.6
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    elevation: float = 0.4
    start_angle: float = 0.0
    dolly_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 <= self.dolly_fraction < 1:
            raise ValueError("dolly_fraction must lie in [0, 1)")
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


def _texture(prim: ScenePrimitive, local: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brightness factor in [0.6, 1] so hue is preserved."""
    if prim.texture_id == 0:
        cells = np.floor(local * 4.0).astype(np.int64).sum(axis=1)
        return np.where(cells % 2 == 0, 1.0, 0.6)
    if prim.texture_id == 1:
        extent = float(np.max(prim.size))
        return 0.6 + 0.4 * np.clip(0.5 - 0.5 * local[:, 1] / extent, 0.0, 1.0)
    return rng.uniform(0.6, 1.0, size=len(local))


def _grid(n: int, a: float, b: float, rng) -> np.ndarray:
    """About ``n`` jittered-stratified samples on the rectangle [-a, a] x [-b, b]."""
    if n <= 0:
        return np.zeros((0, 2))
    nx = max(1, int(round(math.sqrt(n * a / b))))
    ny = max(1, int(round(n / nx)))
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    jit = rng.random((nx * ny, 2))
    s = (i.ravel() + jit[:, 0]) / nx
    t = (j.ravel() + jit[:, 1]) / ny
    return np.stack([(2 * s - 1) * a, (2 * t - 1) * b], axis=1)


def _sample_primitive(prim: ScenePrimitive, density: float, rng) -> np.ndarray:
    if prim.kind == "sphere":
        n = max(1, int(round(prim.area * density)))
        k = np.arange(n)
        # Fibonacci lattice with a random offset and orientation
        z = 1.0 - 2.0 * (k + rng.random(n) * 0.5 + 0.25) / n
        phi = k * GOLDEN_ANGLE + rng.uniform(0, 2 * math.pi)
        rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        unit = np.stack([rho * np.cos(phi), z, rho * np.sin(phi)], axis=1)
        return unit * prim.size[0]
    if prim.kind == "plane":
        hx, hz = prim.size
        uv = _grid(int(round(prim.area * density)), hx, hz, rng)
        return np.stack([uv[:, 0], np.zeros(len(uv)), uv[:, 1]], axis=1)
    faces = []
    a = prim.size
    for axis in range(3):
        u_ax, v_ax = [ax for ax in range(3) if ax != axis]
        face_area = 4.0 * a[u_ax] * a[v_ax]
        for sign in (-1.0, 1.0):
            uv = _grid(int(round(face_area * density)), a[u_ax], a[v_ax], rng)
            p = np.zeros((len(uv), 3))
            p[:, u_ax], p[:, v_ax] = uv[:, 0], uv[:, 1]
            p[:, axis] = sign * a[axis]
            faces.append(p)
    return np.concatenate(faces)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Colored surface samples of every primitive; bit-identical for identical specs."""
    if not spec.primitives:
        raise EmptyScene("scene has no primitives")
    pts, cols = [], []
    for i, prim in enumerate(spec.primitives):
        rng = _rng(spec.seed, i)
        local = _sample_primitive(prim, spec.points_per_unit_area, rng)
        shade = _texture(prim, local, rng)
        pts.append(local + prim.center)
        cols.append(np.clip(prim.albedo[None, :] * shade[:, None], 0.0, 1.0))
    return PointCloud(np.concatenate(pts), np.concatenate(cols))


def sample_trajectory(spec: TrajectorySpec) -> list:
    n = spec.n_frames
    frac = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    poses = []
    for f in frac:
        theta = spec.start_angle
        elev = spec.elevation
        dist = spec.radius
        if spec.kind in ("orbit", "arc"):
            theta = spec.start_angle + spec.angular_span * f
        if spec.kind == "arc":
            elev = spec.elevation + 0.5 * spec.angular_span * f
        if spec.kind == "dolly":
            dist = spec.radius * (1.0 - spec.dolly_fraction * f)
        # world -y is up
        offset = dist * np.array([math.cos(elev) * math.sin(theta), -math.sin(elev),
                                  -math.cos(elev) * math.cos(theta)])
        poses.append(CameraExtrinsics.look_at(spec.look_at + offset, spec.look_at))
    return poses


class RenderedScene(NamedTuple):
    video: Video6D
    depths: list
    cameras: list
    cloud: PointCloud
    transform: NormalizationTransform


def render_ground_truth(scene: SceneSpec, traj: TrajectorySpec, splat_radius: int = 0,
                        anchor_first: bool = True, cloud: Optional[PointCloud] = None) -> RenderedScene:
    """Render a 6D video of ``scene`` along ``traj``.

    With ``anchor_first`` the world frame is the first camera's frame before
    normalization, so frame 0 always has identity rotation.  XYZ pixels are the
    unprojection of the z-buffer depth, which keeps depth, camera and XYZ exactly
    consistent; pixels whose unprojection falls outside [-1, 1]^3 are dropped.
    """
    if cloud is None:
        cloud = generate_scene(scene)
    K = traj.intrinsics
    poses = sample_trajectory(traj)
    if anchor_first:
        anchor = poses[0]
        cloud = cloud.transformed(anchor.apply(cloud.points))
        inv = anchor.inverse()
        poses = [p.compose(inv) for p in poses]
    norm_cloud, transform = normalize_pointcloud(cloud)
    poses = [transform.apply_to_camera(p) for p in poses]

    frames, depths, cameras = [], [], []
    for E in poses:
        winner, depth = zbuffer(norm_cloud.points, K, E, splat_radius)
        valid = winner >= 0
        xyz = unproject_depth(depth, valid, K, E)
        inside = np.all(np.abs(xyz.data) <= 1.0, axis=-1)
        valid &= inside
        xyz = XyzImage(xyz.data, valid, np.where(valid, depth, 0.0))
        rgb = np.zeros((K.height, K.width, 3))
        if norm_cloud.colors is not None:
            rgb[valid] = norm_cloud.colors[winner[valid]]
        frames.append(Frame6D(rgb, xyz, (K, E)))
        depths.append(xyz.depth_buffer)
        cameras.append((K, E))
    return RenderedScene(Video6D(frames), depths, cameras, norm_cloud, transform)


def random_albedo(rng) -> np.ndarray:
    """Saturated color whose brightest channel is at least 0.5."""
    c = rng.uniform(0.05, 1.0, size=3)
    c[rng.integers(3)] = rng.uniform(0.7, 1.0)
    return c


def random_scene(seed: int, density: float = DEFAULT_DENSITY, n_objects: Optional[int] = None) -> SceneSpec:
    """Tabletop scene: a textured ground plane with a few boxes and spheres on or above it."""
    rng = _rng(seed, 2**32 + 1)
    ground_y = 0.5
    prims = [ScenePrimitive("plane", [0.0, ground_y, 0.0], [GROUND_HALF, GROUND_HALF], rng.uniform(0.35, 0.75, 3),
                            texture_id=0)]
    if n_objects is None:
        n_objects = int(rng.integers(2, 4))
    placed = []
    attempts = 0
    while len(placed) < n_objects and attempts < 100:
        attempts += 1
        kind = "sphere" if rng.random() < 0.5 else "box"
        size = rng.uniform(0.15, 0.4)
        xz = rng.uniform(-0.75, 0.75, size=2)
        if any(np.hypot(*(xz - q)) < size + s + 0.05 for q, s in placed):
            continue
        lift = rng.uniform(0.0, 0.4) if rng.random() < 0.3 else 0.0
        y = ground_y - size - lift
        if kind == "sphere":
            p = ScenePrimitive("sphere", [xz[0], y, xz[1]], [size], random_albedo(rng),
                               int(rng.integers(3)))
        else:
            half = size * rng.uniform(0.6, 1.0, size=3)
            half[1] = size
            p = ScenePrimitive("box", [xz[0], y, xz[1]], half, random_albedo(rng), int(rng.integers(3)))
        prims.append(p)
        placed.append((xz, size))
    return SceneSpec(int(seed), prims, density)


def random_trajectory(seed: int, n_frames: int = 6, intrinsics: Optional[CameraIntrinsics] = None) -> TrajectorySpec:
    rng = _rng(seed, 2**32 + 2)
    kind = TRAJECTORIES[int(rng.integers(3))]
    span = rng.uniform(0.3, 0.8) * (1 if rng.random() < 0.5 else -1)
    return TrajectorySpec(
        kind=kind, n_frames=n_frames, look_at=np.array([0.0, 0.2, 0.0]),
        radius=float(rng.uniform(2.3, 3.0)), angular_span=float(span),
        intrinsics=intrinsics or CameraIntrinsics.default(),
        elevation=float(rng.uniform(0.3, 0.6)), start_angle=float(rng.uniform(-math.pi, math.pi)),
        dolly_fraction=float(rng.uniform(0.2, 0.4)),
    )


def random_video(seed: int, n_frames: int = 6, intrinsics: Optional[CameraIntrinsics] = None,
                 density: float = DEFAULT_DENSITY) -> RenderedScene:
    return render_ground_truth(random_scene(seed, density), random_trajectory(seed, n_frames, intrinsics))
