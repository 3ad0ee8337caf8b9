"""Camera and depth recovery from an XYZ image by re-projection loss minimization.

The loss is  sum_valid || R^T (d K^-1 [u, v, 1] - t) - xyz ||^2.  Because R is a
rotation this equals the camera-frame form  sum || d * ray - t - R xyz ||^2,
which is what the code evaluates.

Parameter vector layout used by :func:`analytic_gradient`::

    [rotation increment (3, axis-angle, left-multiplied), translation (3),
     fx, cx, cy, log-depth of every valid pixel in row-major order]

fy is tied to fx through the fixed aspect ratio fy / fx; the solvers start
from square pixels (fy = fx), so in practice a single focal length is fitted.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import rq
from scipy.spatial.transform import Rotation

from .errors import (DegenerateConfiguration, EmptyMask, InsufficientCorrespondences,
                     NoValidPixels)
from .geometry import CameraExtrinsics, CameraIntrinsics, XyzImage

N_CAMERA_PARAMS = 9
MIN_DLT_POINTS = 6
DEPTH_FLOOR = 1e-6


@dataclass
class OptimizerConfig:
    max_iterations: int = 2000
    step_size: float = 1.0
    tolerance: float = 1e-10
    optimize_intrinsics: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.step_size > 0 and self.tolerance > 0):
            raise ValueError("step_size and tolerance must be positive")


@dataclass
class CameraSolution:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    depth: np.ndarray
    final_residual: float
    converged: bool
    iterations: int
    initial_residual: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "quaternion": [float(x) for x in self.extrinsics.quaternion],
            "translation": [float(x) for x in self.extrinsics.translation],
            "converged": bool(self.converged),
            "final_residual": float(self.final_residual),
        }


@dataclass
class DepthMetrics:
    abs_rel: float
    delta_1_25: float
    delta_1_03: float

    def to_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "delta_1_25": self.delta_1_25, "delta_1_03": self.delta_1_03}


@dataclass
class PoseError:
    rotation_deg: float
    translation: float

    def to_dict(self) -> dict:
        return {"rotation_deg": self.rotation_deg, "translation": self.translation}


def _correspondences(xyz: XyzImage):
    v, u = np.nonzero(xyz.valid)
    return u.astype(np.float64), v.astype(np.float64), xyz.data[v, u]


def _similarity(points: np.ndarray) -> np.ndarray:
    """Hartley normalization: centroid to origin, mean distance sqrt(dim)."""
    dim = points.shape[1]
    c = points.mean(axis=0)
    d = np.linalg.norm(points - c, axis=1).mean()
    s = np.sqrt(dim) / d if d > 0 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * c
    return T


def init_camera_dlt(xyz: XyzImage) -> tuple[CameraIntrinsics, CameraExtrinsics]:
    """Direct linear transform for P = K [R | t] from pixel <-> XYZ pairs, then RQ factorization."""
    u, v, X = _correspondences(xyz)
    n = len(u)
    if n < MIN_DLT_POINTS:
        raise InsufficientCorrespondences(f"DLT needs >= {MIN_DLT_POINTS} valid pixels, got {n}")
    uv = np.stack([u, v], axis=1)
    T2 = _similarity(uv)
    T3 = _similarity(X)
    uvn = uv @ T2[:2, :2].T + T2[:2, 2]
    Xn = np.hstack([X @ T3[:3, :3].T + T3[:3, 3], np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -uvn[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -uvn[:, 1:] * Xn
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    # a unique projection matrix needs an 11-dimensional row space
    if s[10] <= 1e-9 * s[0]:
        raise DegenerateConfiguration("DLT system is rank deficient (collinear or coplanar points)")
    Pn = Vt[-1].reshape(3, 4)
    P = np.linalg.inv(T2) @ Pn @ T3
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    Kr, R = rq(M)
    D = np.diag(np.sign(np.diag(Kr)))
    Kr = Kr @ D
    R = D @ R
    t = np.linalg.solve(Kr, P[:, 3])
    Kn = Kr / Kr[2, 2]
    H, W = xyz.shape
    K = CameraIntrinsics(float(Kn[0, 0]), float(Kn[1, 1]), float(Kn[0, 2]), float(Kn[1, 2]), W, H)
    return K, CameraExtrinsics.from_rt(R, t)


def _rays(K: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1)


def _residuals(rays, d, t, y):
    return d[:, None] * rays - t[None, :] - y


def objective(xyz: XyzImage, K: CameraIntrinsics, E: CameraExtrinsics, depth: np.ndarray) -> float:
    """Sum of squared distances between the unprojected depth map and the XYZ image."""
    u, v, X = _correspondences(xyz)
    d = np.asarray(depth, dtype=np.float64)[v.astype(int), u.astype(int)]
    e = _residuals(_rays(K, u, v), d, E.translation, X @ E.rotation.T)
    return float(np.sum(e * e))


def _camera_gradient(K: CameraIntrinsics, rays, d, e, y) -> np.ndarray:
    g = np.empty(N_CAMERA_PARAMS)
    g[0:3] = 2.0 * np.cross(e, y).sum(axis=0)
    g[3:6] = -2.0 * e.sum(axis=0)
    de = d[:, None] * e
    g[6] = -2.0 / K.fx * np.sum(de[:, 0] * rays[:, 0] + de[:, 1] * rays[:, 1])
    g[7] = -2.0 / K.fx * np.sum(de[:, 0])
    g[8] = -2.0 / K.fy * np.sum(de[:, 1])
    return g


def analytic_gradient(xyz: XyzImage, K: CameraIntrinsics, E: CameraExtrinsics,
                      depth: np.ndarray) -> np.ndarray:
    u, v, X = _correspondences(xyz)
    d = np.asarray(depth, dtype=np.float64)[v.astype(int), u.astype(int)]
    rays = _rays(K, u, v)
    y = X @ E.rotation.T
    e = _residuals(rays, d, E.translation, y)
    return np.concatenate([_camera_gradient(K, rays, d, e, y), 2.0 * d * np.sum(e * rays, axis=1)])


def apply_update(K: CameraIntrinsics, E: CameraExtrinsics, depth: np.ndarray, valid: np.ndarray,
                 delta: np.ndarray):
    """Move along a parameter-space direction laid out like :func:`analytic_gradient`."""
    E2 = E.perturbed(delta[0:3], delta[3:6])
    fx = K.fx + delta[6]
    K2 = replace(K, fx=fx, fy=K.fy * fx / K.fx, cx=K.cx + delta[7], cy=K.cy + delta[8])
    d2 = np.array(depth, dtype=np.float64)
    if len(delta) > N_CAMERA_PARAMS:
        d2[valid] = d2[valid] * np.exp(delta[N_CAMERA_PARAMS:])
    return K2, E2, d2


class _Problem:
    """Valid pixels of one XYZ image with the depth block eliminated in closed form."""

    def __init__(self, xyz: XyzImage):
        self.u, self.v, self.X = _correspondences(xyz)
        if len(self.u) == 0:
            raise NoValidPixels("XYZ image has no valid pixels")
        self.n = len(self.u)

    def best_depth(self, K, E):
        rays = _rays(K, self.u, self.v)
        q = self.X @ E.rotation.T + E.translation
        d = np.sum(rays * q, axis=1) / np.sum(rays * rays, axis=1)
        return np.maximum(d, DEPTH_FLOOR), rays

    def trial(self, K, E, d, delta):
        """Loss after a step; non-physical intrinsics count as an infinite loss."""
        try:
            K2, E2, _ = apply_update(K, E, d, None, delta)
        except ValueError:
            return None, None, np.inf, None, None, None
        return (K2, E2) + self.loss(K2, E2)

    def loss(self, K, E):
        d, rays = self.best_depth(K, E)
        e = _residuals(rays, d, E.translation, self.X @ E.rotation.T)
        return float(np.sum(e * e)), d, rays, e

    def camera_gradient(self, K, E, d, rays, e):
        y = self.X @ E.rotation.T
        g = _camera_gradient(K, rays, d, e, y)
        # Gauss-Newton diagonal as a per-parameter step scale
        yy = np.sum(y * y, axis=1)
        h = np.empty(N_CAMERA_PARAMS)
        h[0:3] = np.sum(yy[:, None] - y * y, axis=0)
        h[3:6] = self.n
        d2 = d * d
        h[6] = np.sum(d2 * (rays[:, 0] ** 2 + rays[:, 1] ** 2)) / K.fx ** 2
        h[7] = np.sum(d2) / K.fx ** 2
        h[8] = np.sum(d2) / K.fy ** 2
        return g, 2.0 * np.maximum(h, 1e-12)

    def depth_image(self, d, shape):
        out = np.zeros(shape)
        out[self.v.astype(int), self.u.astype(int)] = d
        return out


def refine_reprojection(xyz: XyzImage, init: tuple[CameraIntrinsics, CameraExtrinsics],
                        cfg: Optional[OptimizerConfig] = None) -> CameraSolution:
    """Gradient descent with backtracking on the re-projection loss.

    Each iterate keeps the per-pixel depths at their exact minimizer for the
    current camera (a closed-form projection onto the pixel ray), so the
    camera gradient is the gradient of the reduced objective.  Directions are
    diagonally preconditioned conjugate gradients; a step is accepted only if
    it satisfies the Armijo decrease condition, so the loss never increases.
    """
    cfg = cfg or OptimizerConfig()
    prob = _Problem(xyz)
    K, E = init
    mask = np.ones(N_CAMERA_PARAMS)
    if not cfg.optimize_intrinsics:
        mask[6:] = 0.0
    f, d, rays, e = prob.loss(K, E)
    f_init = f
    alpha = cfg.step_size
    converged = False
    prev_g = prev_z = direction = None
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g, h = prob.camera_gradient(K, E, d, rays, e)
        g = g * mask
        z = g / h
        if direction is None:
            direction = -z
        else:
            # preconditioned Polak-Ribiere with automatic restart
            beta = max(0.0, float(z @ (g - prev_g)) / max(float(prev_z @ prev_g), 1e-300))
            direction = -z + beta * direction
        slope = float(g @ direction)
        if slope >= 0:
            direction = -z
            slope = float(g @ direction)
        if f <= 1e-28 or -slope <= 1e-30:
            converged = True
            break
        accepted = False
        while alpha > 1e-12:
            K2, E2, f2, d2, rays2, e2 = prob.trial(K, E, d, alpha * direction)
            if f2 <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        # one quadratic-interpolation refinement of the accepted step length
        curv = f2 - f - alpha * slope
        if curv > 0:
            a_q = -slope * alpha * alpha / (2.0 * curv)
            if 0 < a_q and abs(a_q - alpha) > 1e-3 * alpha:
                Kq, Eq, fq, dq, raysq, eq = prob.trial(K, E, d, a_q * direction)
                if fq < f2:
                    K2, E2, f2, d2, rays2, e2, alpha = Kq, Eq, fq, dq, raysq, eq, a_q
        change = f - f2
        K, E, f, d, rays, e = K2, E2, f2, d2, rays2, e2
        prev_g, prev_z = g, z
        alpha *= 2.0
        if change < cfg.tolerance * max(f + change, 1e-300):
            converged = True
            break
    return CameraSolution(K, E, prob.depth_image(d, xyz.shape), f / prob.n, converged, it,
                          f_init / prob.n)


def solve_view(xyz: XyzImage, cfg: Optional[OptimizerConfig] = None,
               intrinsics: Optional[CameraIntrinsics] = None) -> CameraSolution:
    """DLT initialization followed by refinement.  With ``intrinsics`` given, the DLT
    focal/principal point are replaced by it and kept fixed."""
    K, E = init_camera_dlt(xyz)
    K = square_pixels(K)
    if intrinsics is not None:
        K = intrinsics
        cfg = replace(cfg or OptimizerConfig(), optimize_intrinsics=False)
    return refine_reprojection(xyz, (K, E), cfg)


def square_pixels(K: CameraIntrinsics) -> CameraIntrinsics:
    """Replace fx, fy by their geometric mean."""
    f = float(np.sqrt(K.fx * K.fy))
    return replace(K, fx=f, fy=f)


def worker_count() -> int:
    n = int(os.environ.get("WVD_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def solve_views(xyz_images: Sequence[XyzImage], cfg: Optional[OptimizerConfig] = None,
                shared_intrinsics: bool = True, intrinsics: Optional[CameraIntrinsics] = None,
                workers: Optional[int] = None) -> list:
    """Per-view solves, run concurrently.  With ``shared_intrinsics`` one K (the
    per-view DLT median, unless ``intrinsics`` is given) is used for every view."""
    workers = workers or worker_count()
    if shared_intrinsics and intrinsics is None:
        ks = []
        for img in xyz_images:
            try:
                ks.append(init_camera_dlt(img)[0])
            except (InsufficientCorrespondences, DegenerateConfiguration):
                continue
        if ks:
            H, W = xyz_images[0].shape
            f = float(np.median([np.sqrt(k.fx * k.fy) for k in ks]))
            intrinsics = CameraIntrinsics(f, f,
                                          float(np.median([k.cx for k in ks])),
                                          float(np.median([k.cy for k in ks])), W, H)

    def run(img):
        return solve_view(img, cfg, intrinsics if shared_intrinsics else None)

    if workers <= 1 or len(xyz_images) <= 1:
        return [run(img) for img in xyz_images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, xyz_images))


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray,
                  median_scale: bool = True) -> DepthMetrics:
    """AbsRel and threshold accuracies; optionally median-align pred to gt first."""
    valid = np.asarray(valid, dtype=bool) & (np.asarray(gt) > 0)
    if not np.any(valid):
        raise EmptyMask("no valid pixels to evaluate")
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isfinite(ratio) & (p > 0), ratio, np.inf)
    return DepthMetrics(float(np.mean(np.abs(p - g) / g)), float(np.mean(ratio < 1.25)),
                        float(np.mean(ratio < 1.03)))


def pose_error(est: CameraExtrinsics, gt: CameraExtrinsics) -> PoseError:
    """Geodesic rotation angle and distance between camera centers."""
    rel = Rotation.from_matrix(est.rotation @ gt.rotation.T)
    angle = float(np.degrees(rel.magnitude()))
    return PoseError(min(max(angle, 0.0), 180.0), float(np.linalg.norm(est.center - gt.center)))
