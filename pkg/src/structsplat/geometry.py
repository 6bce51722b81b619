"""Cameras, rigid transforms, quaternions, backprojection and depth-to-normal.

Shared geometric plumbing. Conventions used everywhere else:
  * depth means camera-z depth of a point (not ray length),
  * normals are unit vectors in world coordinates, oriented camera-facing
    (normal . view_direction < 0),
  * world_to_cam maps world points into the camera frame: x_cam = R x + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation precondition is violated."""


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError("camera pose must be 3x3 rotation + 3-vector")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidInputError("rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("rotation determinant must be +1")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be at least 1x1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (points_cam - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel coords (..., 2), camera-z depth (...,))."""
        pc = self.to_cam(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, pixels: np.ndarray) -> np.ndarray:
        """World-space ray directions with unit camera-z component.

        backproject(px, d) == center + d * pixel_rays(px).
        """
        px = np.asarray(pixels, dtype=np.float64)
        d = np.stack(
            [
                (px[..., 0] - self.cx) / self.fx,
                (px[..., 1] - self.cy) / self.fy,
                np.ones_like(px[..., 0]),
            ],
            axis=-1,
        )
        return d @ self.rotation

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center coordinates."""
        u, v = np.meshgrid(
            np.arange(self.width, dtype=np.float64),
            np.arange(self.height, dtype=np.float64),
        )
        return np.stack([u, v], axis=-1)


def backproject(cam: Camera, pixel: np.ndarray, depth) -> np.ndarray:
    """Lift pixels at camera-z depth into world space."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise InvalidInputError("depth must be positive")
    return cam.center + depth[..., None] * cam.pixel_rays(pixel)


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n < 1e-12:
            raise InvalidInputError("zero quaternion has no rotation")
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrices from quaternions (wxyz), normalized internally.

    Accepts a UnitQuaternion, a 4-vector or an (N, 4) batch.  Columns of the
    result are the surfel tangent frame (t_u, t_v, n) with n = t_u x t_v.
    """
    if isinstance(q, UnitQuaternion):
        q = q.as_array()
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInputError("zero quaternion has no rotation")
    w, x, y, z = (q / n).T
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotation_grad_to_quat(q_unit: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Chain dL/dR back to the *unnormalized* quaternion.

    q_unit: (N, 4) already-normalized quaternions; grad_R: (N, 3, 3).
    Returns (N, 4) gradients w.r.t. the normalized quaternion; callers compose
    with the normalization Jacobian themselves if they hold raw vectors.
    """
    w, x, y, z = q_unit.T
    g = grad_R
    gw = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_rows(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if eps:
        n = np.maximum(n, eps)
    return v / n


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) meters
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        bad = self.valid & ~(np.isfinite(self.values) & (self.values > 0))
        if np.any(bad):
            raise InvalidInputError("valid depths must be positive and finite")


@dataclass
class NormalMap:
    values: np.ndarray  # (H, W, 3) unit vectors
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        norms = np.linalg.norm(self.values[self.valid], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise InvalidInputError("valid normals must be unit length")


@dataclass
class SemanticMap:
    """Per-pixel probabilities over (other, wall, floor, ceiling)."""

    values: np.ndarray  # (H, W, 4)
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.values.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        probs = self.values[self.valid]
        if probs.size:
            if np.min(probs) < -1e-12:
                raise InvalidInputError("semantic probabilities must be nonnegative")
            if np.max(np.abs(probs.sum(axis=-1) - 1.0)) > 1e-6:
                raise InvalidInputError("semantic probabilities must sum to 1")


CLASS_NAMES = ("other", "wall", "floor", "ceiling")
CLS_OTHER, CLS_WALL, CLS_FLOOR, CLS_CEILING = 0, 1, 2, 3


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift with edge replication so border stencils fall back to one-sided."""
    H, W = a.shape[:2]
    ys = np.clip(np.arange(H) + dy, 0, H - 1)
    xs = np.clip(np.arange(W) + dx, 0, W - 1)
    return a[np.ix_(ys, xs)]


def depth_to_normal(cam: Camera, depth: DepthMap) -> NormalMap:
    """Unit normals from finite differences of backprojected depth.

    Central differences in the interior, forward/backward at image borders
    (via index clamping the stencil degrades to one-sided there).  Pixels
    adjacent to invalid depth, or with a degenerate cross product, are masked
    invalid.  Normals are camera-facing.
    """
    n, valid, _ = _depth_to_normal_core(cam, depth.values, depth.valid)
    return NormalMap(n, valid)


def _depth_to_normal_core(cam, dvals, dvalid):
    rays = cam.pixel_rays(cam.pixel_grid())  # (H, W, 3)
    P = cam.center + dvals[..., None] * rays

    def diff(arr, axis):
        # clamped-index central difference; one-sided at borders
        if axis == 0:
            hi, lo = _shifted(arr, 1, 0), _shifted(arr, -1, 0)
        else:
            hi, lo = _shifted(arr, 0, 1), _shifted(arr, 0, -1)
        return hi - lo

    dPx = diff(P, 1)
    dPy = diff(P, 0)
    c = np.cross(dPx, dPy)
    norm = np.linalg.norm(c, axis=-1)
    ok = norm > 1e-12
    n = np.zeros_like(c)
    n[ok] = c[ok] / norm[ok][..., None]

    view = P - cam.center
    flip = np.where(np.sum(n * view, axis=-1) > 0, -1.0, 1.0)
    n = n * flip[..., None]

    # a pixel is valid only if every pixel its stencil touched was valid
    stencil_ok = dvalid.copy()
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        stencil_ok &= _shifted(dvalid, dy, dx)
    valid = stencil_ok & ok
    n[~valid] = 0.0
    return n, valid, (P, dPx, dPy, c, norm, flip, rays)


def depth_to_normal_with_grad(cam: Camera, dvals: np.ndarray, dvalid: np.ndarray):
    """Forward pass plus a closure mapping dL/dnormal -> dL/ddepth.

    Used by losses that differentiate through the rendered-depth normal.
    """
    n, valid, tape = _depth_to_normal_core(cam, dvals, dvalid)
    P, dPx, dPy, c, norm, flip, rays = tape
    H, W = dvals.shape

    def backward(grad_n: np.ndarray) -> np.ndarray:
        g = grad_n * flip[..., None]
        ok = valid
        gc = np.zeros_like(c)
        # d(c/|c|) = (I - nn^T)/|c| applied to upstream
        nn = n * flip[..., None]  # unflipped unit normal
        dot = np.sum(g * nn, axis=-1, keepdims=True)
        gc[ok] = (g[ok] - nn[ok] * dot[ok]) / norm[ok][..., None]
        # c = dPx x dPy
        g_dPx = np.cross(dPy, gc)
        g_dPy = np.cross(gc, dPx)

        gP = np.zeros_like(P)
        gP += scatter_x(g_dPx)
        gP += scatter_y(g_dPy)
        return np.sum(gP * rays, axis=-1)

    def scatter_x(garr):
        H_, W_ = garr.shape[:2]
        out = np.zeros_like(garr)
        idx_hi = np.clip(np.arange(W_) + 1, 0, W_ - 1)
        idx_lo = np.clip(np.arange(W_) - 1, 0, W_ - 1)
        np.add.at(out, (slice(None), idx_hi), garr)
        np.add.at(out, (slice(None), idx_lo), -garr)
        return out

    def scatter_y(garr):
        H_, W_ = garr.shape[:2]
        out = np.zeros_like(garr)
        idx_hi = np.clip(np.arange(H_) + 1, 0, H_ - 1)
        idx_lo = np.clip(np.arange(H_) - 1, 0, H_ - 1)
        np.add.at(out, (idx_hi, slice(None)), garr)
        np.add.at(out, (idx_lo, slice(None)), -garr)
        return out

    return n, valid, backward
