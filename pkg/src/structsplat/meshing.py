"""TSDF fusion, marching-cubes mesh extraction, and evaluation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .geometry import Camera, InvalidInputError

DEFAULT_TSDF_VOXEL = 0.02
DEFAULT_TRUNCATION_FACTOR = 3.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    labels: np.ndarray = None  # optional (V,) integer labels

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvalidInputError("triangle indices out of range")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.vertices):
                raise InvalidInputError("labels length must match vertices")

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def drop_degenerate(self, eps: float = 1e-14) -> "TriangleMesh":
        if len(self.triangles) == 0:
            return self
        keep = self.triangle_areas() > eps
        return TriangleMesh(self.vertices, self.triangles[keep], self.labels)


class TsdfVolume:
    """Dense truncated signed distance volume with weight-1 averaging."""

    def __init__(self, origin, extent, voxel_size: float = DEFAULT_TSDF_VOXEL,
                 truncation: float = None):
        if truncation is None:
            truncation = DEFAULT_TRUNCATION_FACTOR * voxel_size
        if truncation < voxel_size:
            raise InvalidInputError("truncation must be >= voxel size")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        extent = np.asarray(extent, dtype=np.float64)
        self.dims = np.maximum(2, np.ceil(extent / voxel_size).astype(int) + 1)
        self.tsdf = np.zeros(tuple(self.dims))
        self.weight = np.zeros(tuple(self.dims))
        ii, jj, kk = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
        self._centers = (
            self.origin
            + np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * self.voxel_size
        )

    def integrate(self, depth: np.ndarray, cam: Camera,
                  depth_valid: np.ndarray = None):
        """Project every voxel center into the view and update the clamped
        signed distance with a weight-1 running average."""
        pts_cam = self._centers @ cam.rotation.T + cam.translation
        z = pts_cam[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = cam.fx * pts_cam[:, 0] / zs + cam.cx
        v = cam.fy * pts_cam[:, 1] / zs + cam.cy
        ui = np.round(u).astype(int)
        vi = np.round(v).astype(int)
        inb = (
            front
            & (ui >= 0) & (ui < cam.width)
            & (vi >= 0) & (vi < cam.height)
        )
        ui_c = np.clip(ui, 0, cam.width - 1)
        vi_c = np.clip(vi, 0, cam.height - 1)
        d_px = depth[vi_c, ui_c]
        ok = inb & (d_px > 0)
        if depth_valid is not None:
            ok &= depth_valid[vi_c, ui_c]
        sdf = d_px - z
        ok &= sdf >= -self.truncation
        if not np.any(ok):
            return
        val = np.clip(sdf[ok] / self.truncation, -1.0, 1.0)
        flat_t = self.tsdf.reshape(-1)
        flat_w = self.weight.reshape(-1)
        idx = np.flatnonzero(ok)
        w_old = flat_w[idx]
        flat_t[idx] = (flat_t[idx] * w_old + val) / (w_old + 1.0)
        flat_w[idx] = w_old + 1.0


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    observed = volume.weight > 0
    if not np.any(observed) or not (volume.tsdf[observed].min() < 0 < volume.tsdf[observed].max()):
        warnings.warn("TSDF volume contains no zero crossing; empty mesh",
                      RuntimeWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # Unobserved voxels carry no signal: push them to free space and erode
    # the mask so only cubes whose corners are all observed are meshed
    # (skimage's mask does not reliably exclude partially observed cubes).
    values = np.where(observed, volume.tsdf, 1.0)
    safe = binary_erosion(observed, structure=np.ones((3, 3, 3), bool))
    if not np.any(safe) or not (values[safe].min() <= 0.0 <= values[safe].max()):
        warnings.warn("TSDF volume contains no interior zero crossing; "
                      "empty mesh", RuntimeWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = marching_cubes(
            values, level=0.0,
            spacing=(volume.voxel_size,) * 3,
            mask=safe,
        )
    except (RuntimeError, ValueError):
        warnings.warn("marching cubes found no surface; empty mesh",
                      RuntimeWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts + volume.origin
    return TriangleMesh(verts, faces).drop_degenerate()


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform point sampling; meshes without triangles fall back to
    their vertex set (point-set mode)."""
    if mesh.is_empty:
        raise InvalidInputError("cannot sample an empty mesh")
    if len(mesh.triangles) == 0:
        return mesh.vertices
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(areas), size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@dataclass
class GeoMetrics:
    acc: float
    comp: float
    prec: float
    recall: float

    @property
    def cd(self) -> float:
        return 0.5 * (self.acc + self.comp)

    @property
    def f1(self) -> float:
        if self.prec + self.recall == 0:
            return 0.0
        return 2 * self.prec * self.recall / (self.prec + self.recall)


def geo_metrics(
    pred: TriangleMesh,
    gt: TriangleMesh,
    samples: int = 10000,
    threshold: float = 0.05,
    seed: int = 0,
) -> GeoMetrics:
    """Accuracy/completeness/chamfer and precision/recall/F1 at a distance
    threshold, over seeded area-uniform samples of both meshes."""
    if pred.is_empty or gt.is_empty:
        raise InvalidInputError("geo_metrics requires nonempty meshes")
    p = sample_mesh_points(pred, samples, seed)
    g = sample_mesh_points(gt, samples, seed)
    d_pg = cKDTree(g).query(p)[0]
    d_gp = cKDTree(p).query(g)[0]
    return GeoMetrics(
        acc=float(d_pg.mean()),
        comp=float(d_gp.mean()),
        prec=float((d_pg <= threshold).mean()),
        recall=float((d_gp <= threshold).mean()),
    )


def semantic_iou(
    pred_labels: np.ndarray, gt_labels: np.ndarray, classes=(1, 2, 3)
) -> dict:
    """Per-class intersection-over-union over all pixels; a class absent in
    both prediction and ground truth scores 1 (vacuously perfect)."""
    if pred_labels.shape != gt_labels.shape:
        raise InvalidInputError("semantic_iou: shape mismatch")
    out = {}
    for c in classes:
        p = pred_labels == c
        g = gt_labels == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            out[c] = 1.0
        else:
            out[c] = float(np.logical_and(p, g).sum() / union)
    return out


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) on [0,1] intensities; identical images -> +inf."""
    if rendered.shape != target.shape:
        raise InvalidInputError("psnr: shape mismatch")
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
