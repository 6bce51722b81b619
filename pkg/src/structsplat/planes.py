"""Learnable floor/ceiling plane indicators and the structural losses.

The scene structure is summarized by a gravity direction n_g plus two
offsets: floor plane d_f + n_g.p = 0 and ceiling plane d_c - n_g.p = 0.
Indicators are initialized from semantically labeled points (majority voting
plus RANSAC), re-initialized when a fresh fit disagrees strongly, and
otherwise refined by gradient descent together with the Gaussians.

Losses take the semantic probabilities as fixed weights; gradients flow into
surfel normals/positions and the plane parameters only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoders import SurfelBatch, SurfelGrads
from .geometry import (
    CLS_CEILING,
    CLS_FLOOR,
    CLS_OTHER,
    CLS_WALL,
    Camera,
    InvalidInputError,
    depth_to_normal_with_grad,
)


class PlaneFitError(RuntimeError):
    pass


@dataclass
class PlaneIndicators:
    n_g: np.ndarray  # unit gravity direction
    d_f: float
    d_c: float = 0.0
    has_ceiling: bool = True

    def __post_init__(self):
        self.n_g = np.asarray(self.n_g, dtype=np.float64)
        if abs(np.linalg.norm(self.n_g) - 1.0) > 1e-9:
            raise InvalidInputError("gravity direction must be unit length")
        if self.has_ceiling and abs(self.d_c + self.d_f) <= 1e-6:
            raise InvalidInputError("floor and ceiling planes must be distinct")

    def copy(self) -> "PlaneIndicators":
        return PlaneIndicators(self.n_g.copy(), self.d_f, self.d_c, self.has_ceiling)


@dataclass
class LabeledPointCloud:
    points: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N,) in {other, wall, floor, ceiling}
    confidence: np.ndarray  # (N,)


# ties broken by priority floor > ceiling > wall > other
_TIE_PRIORITY = {CLS_FLOOR: 0, CLS_CEILING: 1, CLS_WALL: 2, CLS_OTHER: 3}


def vote_point_labels(
    points: np.ndarray,
    observations: list,
    label_maps: dict,
) -> LabeledPointCloud:
    """Majority vote of per-view semantic labels at each point's projections.

    observations[i] is a sequence of (view_id, u, v) pixel observations of
    point i; label_maps maps view_id to an (H, W) integer label image.
    Points with no valid observation become `other` with confidence 0.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.full(len(points), CLS_OTHER, dtype=np.int64)
    conf = np.zeros(len(points))
    for i, obs in enumerate(observations):
        votes = []
        for view_id, u, v in obs:
            lm = label_maps[view_id]
            ui, vi = int(round(u)), int(round(v))
            if 0 <= vi < lm.shape[0] and 0 <= ui < lm.shape[1]:
                votes.append(int(lm[vi, ui]))
        if not votes:
            continue
        counts = np.bincount(votes, minlength=4)
        best = counts.max()
        winners = [c for c in np.flatnonzero(counts == best)]
        winners.sort(key=lambda c: _TIE_PRIORITY[c])
        labels[i] = winners[0]
        conf[i] = best / len(votes)
    return LabeledPointCloud(points, labels, conf)


def fit_floor_ransac(
    floor_points: np.ndarray,
    non_floor_points: np.ndarray = None,
    iters: int = 1024,
    inlier_tol: float = 0.02,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """RANSAC plane fit of the floor, least-squares refined over inliers.

    Returns (n_g, d_f) with n_g oriented so the majority of non-floor points
    lie on the positive side d_f + n_g.p > 0 (scene interior above floor).
    """
    pts = np.asarray(floor_points, dtype=np.float64)
    if len(pts) < 3:
        raise PlaneFitError("need at least 3 floor points")
    rng = np.random.default_rng(seed)
    n_pts = len(pts)
    best_count = -1
    best_inliers = None
    for _ in range(iters):
        idx = rng.choice(n_pts, 3, replace=False)
        a, b, c = pts[idx]
        n = np.cross(b - a, c - a)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n = n / nn
        dist = np.abs((pts - a) @ n)
        inl = dist <= inlier_tol
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
    if best_inliers is None or best_count < 3:
        raise PlaneFitError("all RANSAC hypotheses degenerate (collinear points?)")

    inl_pts = pts[best_inliers]
    centroid = inl_pts.mean(axis=0)
    _, _, vt = np.linalg.svd(inl_pts - centroid, full_matrices=False)
    n_g = vt[-1]
    n_g = n_g / np.linalg.norm(n_g)

    if non_floor_points is not None and len(non_floor_points):
        d = -np.mean(inl_pts @ n_g)
        above = np.asarray(non_floor_points) @ n_g + d > 0
        if above.mean() < 0.5:
            n_g = -n_g
    d_f = -float(np.mean(inl_pts @ n_g))
    return n_g, d_f


def ceiling_offset(ceiling_points: np.ndarray, n_g: np.ndarray):
    """Mean projection of ceiling points onto gravity; None when there are
    no ceiling points (urban mode, ceiling plane omitted)."""
    pts = np.asarray(ceiling_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return None
    return float(np.mean(pts @ np.asarray(n_g, dtype=np.float64)))


def init_plane_indicators(
    cloud: LabeledPointCloud,
    iters: int = 1024,
    inlier_tol: float = 0.02,
    seed: int = 0,
) -> PlaneIndicators:
    floor = cloud.points[cloud.labels == CLS_FLOOR]
    non_floor = cloud.points[cloud.labels != CLS_FLOOR]
    n_g, d_f = fit_floor_ransac(floor, non_floor, iters, inlier_tol, seed)
    d_c = ceiling_offset(cloud.points[cloud.labels == CLS_CEILING], n_g)
    if d_c is None:
        return PlaneIndicators(n_g, d_f, 0.0, has_ceiling=False)
    return PlaneIndicators(n_g, d_f, d_c, has_ceiling=True)


def maybe_reinit(
    current: PlaneIndicators,
    fresh: PlaneIndicators,
    angle_thresh_deg: float = 10.0,
    offset_thresh: float = 0.1,
) -> PlaneIndicators:
    """Replace the indicators iff the fresh fit deviates beyond thresholds."""
    cosang = np.clip(current.n_g @ fresh.n_g, -1.0, 1.0)
    angle = np.degrees(np.arccos(cosang))
    replace = angle > angle_thresh_deg or abs(current.d_f - fresh.d_f) > offset_thresh
    if current.has_ceiling and fresh.has_ceiling:
        replace = replace or abs(current.d_c - fresh.d_c) > offset_thresh
    return fresh.copy() if replace else current


@dataclass
class PlaneGrads:
    n_g_raw: np.ndarray  # gradient w.r.t. the unnormalized gravity vector
    d_f: float
    d_c: float


def _sign0(x):
    # subgradient of |.| at 0 taken as 0
    return np.sign(x)


def loss_3d_global(
    batch: SurfelBatch,
    planes: PlaneIndicators,
    n_g_raw: np.ndarray = None,
    sem_weights: np.ndarray = None,
) -> tuple[float, SurfelGrads, PlaneGrads, dict]:
    """Global planar regularization over Gaussians.

    Normal alignment: floor/ceiling Gaussians parallel to gravity, wall
    Gaussians perpendicular.  Planar constraint: floor/ceiling Gaussian
    centers on their plane.  Each term is averaged over its member set.
    Set membership and probability weights come from `sem_weights`
    (defaults to batch.sem) and are treated as constants.
    """
    if n_g_raw is None:
        n_g_raw = planes.n_g
    n_g_raw = np.asarray(n_g_raw, dtype=np.float64)
    raw_norm = np.linalg.norm(n_g_raw)
    ng = n_g_raw / raw_norm
    sem = batch.sem if sem_weights is None else sem_weights
    labels = np.argmax(sem, axis=1)
    sg = SurfelGrads(batch)
    g_ng = np.zeros(3)
    g_df = 0.0
    g_dc = 0.0
    terms = {"parallel": 0.0, "perp": 0.0, "ceiling": 0.0, "floor": 0.0}

    normals = batch.frame[:, :, 2]
    pos = batch.position

    par = (labels == CLS_FLOOR) | (labels == CLS_CEILING)
    if planes.has_ceiling is False:
        par = labels == CLS_FLOOR
    if np.any(par):
        w = sem[par, CLS_FLOOR] + sem[par, CLS_CEILING]
        dots = normals[par] @ ng
        terms["parallel"] = float(np.mean(w * (1.0 - np.abs(dots))))
        s = _sign0(dots)
        coef = -(w * s) / par.sum()
        sg.frame[par, :, 2] += coef[:, None] * ng
        g_ng += (coef[:, None] * normals[par]).sum(axis=0)

    perp = labels == CLS_WALL
    if np.any(perp):
        w = sem[perp, CLS_WALL]
        dots = normals[perp] @ ng
        terms["perp"] = float(np.mean(w * np.abs(dots)))
        s = _sign0(dots)
        coef = (w * s) / perp.sum()
        sg.frame[perp, :, 2] += coef[:, None] * ng
        g_ng += (coef[:, None] * normals[perp]).sum(axis=0)

    if planes.has_ceiling:
        ceil = labels == CLS_CEILING
        if np.any(ceil):
            w = sem[ceil, CLS_CEILING]
            r = planes.d_c - pos[ceil] @ ng
            terms["ceiling"] = float(np.mean(w * np.abs(r)))
            s = _sign0(r)
            coef = (w * s) / ceil.sum()
            g_dc += coef.sum()
            g_ng += (-coef[:, None] * pos[ceil]).sum(axis=0)
            sg.position[ceil] += -coef[:, None] * ng

    floor = labels == CLS_FLOOR
    if np.any(floor):
        w = sem[floor, CLS_FLOOR]
        r = planes.d_f + pos[floor] @ ng
        terms["floor"] = float(np.mean(w * np.abs(r)))
        s = _sign0(r)
        coef = (w * s) / floor.sum()
        g_df += coef.sum()
        g_ng += (coef[:, None] * pos[floor]).sum(axis=0)
        sg.position[floor] += coef[:, None] * ng

    # chain through the normalization of the raw gravity vector
    g_raw = (g_ng - ng * (g_ng @ ng)) / raw_norm
    loss = float(sum(terms.values()))
    return loss, sg, PlaneGrads(g_raw, float(g_df), float(g_dc)), terms


def loss_2d_local(
    depth: np.ndarray,
    acc_alpha: np.ndarray,
    sem_buffer: np.ndarray,
    cam: Camera,
    planes: PlaneIndicators,
    acc_threshold: float = 0.5,
    frozen_weights: tuple = None,
) -> tuple[float, np.ndarray]:
    """Local surface regularization on the rendered depth.

    The depth-derived normal is pushed perpendicular to gravity in wall
    pixels and parallel in floor/ceiling pixels, weighted by the rendered
    semantic probabilities.  Gravity and the weights are constants here;
    the returned gradient is w.r.t. the rendered depth map.
    """
    mask = acc_alpha >= acc_threshold
    if frozen_weights is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            p_w = np.where(mask, sem_buffer[..., CLS_WALL] / acc_alpha, 0.0)
            p_cf = np.where(
                mask,
                (sem_buffer[..., CLS_FLOOR] + sem_buffer[..., CLS_CEILING])
                / acc_alpha,
                0.0,
            )
    else:
        p_w, p_cf, mask = frozen_weights

    nd, nd_valid, back = depth_to_normal_with_grad(cam, depth, mask)
    valid = mask & nd_valid
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(depth)
    ng = planes.n_g
    dots = nd @ ng
    a = np.abs(dots)
    loss = float(np.sum(np.where(valid, p_w * a + p_cf * (1.0 - a), 0.0)) / n)
    g_a = np.where(valid, (p_w - p_cf) / n, 0.0)
    g_nd = (g_a * _sign0(dots))[..., None] * ng
    return loss, back(g_nd)
