"""Synthetic Atlanta-world scenes: analytic ray-traced box rooms and street
blocks with exact ground-truth depth/normal/semantic priors, labeled sparse
points with multi-view correspondences, a ground-truth mesh, and ground-truth
plane parameters.  Priors at noise level 0 are exactly consistent with the
analytic geometry; optional noise models a pretrained prior network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import SceneDataset
from .geometry import (
    CLS_CEILING,
    CLS_FLOOR,
    CLS_OTHER,
    CLS_WALL,
    Camera,
    InvalidInputError,
)
from .meshing import TriangleMesh
from .planes import PlaneIndicators


class GenerationError(RuntimeError):
    pass


@dataclass
class BoxSpec:
    center: tuple
    size: tuple
    yaw: float = 0.0
    side_label: int = CLS_OTHER
    top_label: int = CLS_OTHER


@dataclass
class SphereSpec:
    center: tuple
    radius: float


@dataclass
class SceneSpec:
    mode: str = "indoor"
    extents: tuple = (4.0, 3.0, 2.5)
    n_cameras: int = 24
    width: int = 160
    height: int = 120
    hfov_deg: float = 70.0
    furniture: tuple = field(
        default_factory=lambda: (
            BoxSpec(center=(2.8, 1.0, 0.3), size=(0.8, 0.6, 0.6), yaw=0.4),
        )
    )
    texture: str = "checker"  # checker | noise
    checker_freq: float = 2.0  # cells per scene unit
    depth_sigma: float = 0.0  # multiplicative
    normal_sigma_deg: float = 0.0
    label_flip_rate: float = 0.0
    n_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise InvalidInputError("extents must be positive")
        if self.n_cameras < 2:
            raise InvalidInputError("need at least 2 cameras")
        if min(self.depth_sigma, self.normal_sigma_deg, self.label_flip_rate) < 0:
            raise InvalidInputError("noise levels must be >= 0")
        if self.mode not in ("indoor", "urban"):
            raise InvalidInputError(f"unknown mode {self.mode}")


# ------------------------------------------------------------- primitives
# Every primitive intersects a bundle of rays p = o + t*d (d need not be
# unit; t is then camera-z depth for unit-z rays) and reports hit distance,
# outward normal, and semantic label.

_BIG = np.inf


class _RoomInterior:
    """Axis-aligned box [0,ex]x[0,ey]x[0,ez] seen from inside."""

    def __init__(self, extents):
        self.extents = np.asarray(extents, dtype=np.float64)

    def contains(self, p):
        return np.all((p > 0) & (p < self.extents))

    def intersect(self, o, d):
        n_rays = len(d)
        t_best = np.full(n_rays, _BIG)
        normal = np.zeros((n_rays, 3))
        label = np.zeros(n_rays, dtype=np.int64)
        faces = [
            (2, 0.0, (0, 0, 1.0), CLS_FLOOR),
            (2, self.extents[2], (0, 0, -1.0), CLS_CEILING),
            (0, 0.0, (1.0, 0, 0), CLS_WALL),
            (0, self.extents[0], (-1.0, 0, 0), CLS_WALL),
            (1, 0.0, (0, 1.0, 0), CLS_WALL),
            (1, self.extents[1], (0, -1.0, 0), CLS_WALL),
        ]
        for axis, plane, n, lab in faces:
            da = d[:, axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (plane - o[axis]) / da
                p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            ax1, ax2 = [a for a in range(3) if a != axis]
            ok = (
                np.isfinite(t) & (t > 1e-9)
                & (p[:, ax1] >= -1e-12) & (p[:, ax1] <= self.extents[ax1] + 1e-12)
                & (p[:, ax2] >= -1e-12) & (p[:, ax2] <= self.extents[ax2] + 1e-12)
                & (t < t_best)
            )
            t_best[ok] = t[ok]
            normal[ok] = n
            label[ok] = lab
        return t_best, normal, label


class _Box:
    """Oriented (yawed) box seen from outside."""

    def __init__(self, spec: BoxSpec):
        self.center = np.asarray(spec.center, dtype=np.float64)
        self.half = np.asarray(spec.size, dtype=np.float64) / 2.0
        c, s = math.cos(spec.yaw), math.sin(spec.yaw)
        self.rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])  # local->world
        self.side_label = spec.side_label
        self.top_label = spec.top_label

    def contains(self, p):
        local = (np.asarray(p) - self.center) @ self.rot
        return np.all(np.abs(local) <= self.half)

    def intersect(self, o, d):
        ol = (o - self.center) @ self.rot
        dl = d @ self.rot
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
        t1 = (-self.half - ol) * inv
        t2 = (self.half - ol) * inv
        tmin = np.nan_to_num(np.minimum(t1, t2), nan=-_BIG)
        tmax = np.nan_to_num(np.maximum(t1, t2), nan=_BIG)
        t_near = np.max(tmin, axis=1)
        t_far = np.min(tmax, axis=1)
        near_axis = np.argmax(tmin, axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-9)
        t = np.where(hit, t_near, _BIG)
        n_rays = len(d)
        normal = np.zeros((n_rays, 3))
        label = np.zeros(n_rays, dtype=np.int64)
        if np.any(hit):
            idx = np.flatnonzero(hit)
            ax = near_axis[idx]
            sign = -np.sign(dl[idx, ax])
            n_local = np.zeros((len(idx), 3))
            n_local[np.arange(len(idx)), ax] = sign
            normal[idx] = n_local @ self.rot.T
            label[idx] = np.where(ax == 2, self.top_label, self.side_label)
        return t, normal, label


class _Sphere:
    def __init__(self, spec: SphereSpec):
        self.center = np.asarray(spec.center, dtype=np.float64)
        self.radius = float(spec.radius)

    def contains(self, p):
        return np.linalg.norm(np.asarray(p) - self.center) <= self.radius

    def intersect(self, o, d):
        oc = o - self.center
        a = np.sum(d * d, axis=1)
        b = 2 * d @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc > 0
        t = np.full(len(d), _BIG)
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        tt = np.where(t0 > 1e-9, t0, t1)
        ok = hit & (tt > 1e-9)
        t[ok] = tt[ok]
        p = o + np.where(ok, t, 0.0)[:, None] * d
        normal = np.zeros((len(d), 3))
        normal[ok] = (p[ok] - self.center) / self.radius
        return t, normal, np.full(len(d), CLS_OTHER, dtype=np.int64)


class _Ground:
    """Finite upward-facing square z=0, |x|,|y| <= half."""

    def __init__(self, half):
        self.half = float(half)

    def contains(self, p):
        return False

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[2] / d[:, 2]
            p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        ok = (
            np.isfinite(t) & (t > 1e-9)
            & (np.abs(p[:, 0]) <= self.half) & (np.abs(p[:, 1]) <= self.half)
        )
        t = np.where(ok, t, _BIG)
        normal = np.zeros((len(d), 3))
        normal[ok] = (0, 0, 1.0)
        return t, normal, np.full(len(d), CLS_FLOOR, dtype=np.int64)


def trace(primitives, origin, dirs):
    """Nearest hit over all primitives.  Returns (t, normal, label, hit)."""
    dirs = np.atleast_2d(dirs)
    t_best = np.full(len(dirs), _BIG)
    normal = np.zeros((len(dirs), 3))
    label = np.full(len(dirs), CLS_OTHER, dtype=np.int64)
    for prim in primitives:
        t, n, lab = prim.intersect(origin, dirs)
        closer = t < t_best
        t_best[closer] = t[closer]
        normal[closer] = n[closer]
        label[closer] = lab[closer]
    hit = np.isfinite(t_best)
    return t_best, normal, label, hit


# ------------------------------------------------------------- appearance

_BASE_COLOR = {
    CLS_OTHER: (0.60, 0.35, 0.30),
    CLS_WALL: (0.70, 0.72, 0.78),
    CLS_FLOOR: (0.62, 0.50, 0.38),
    CLS_CEILING: (0.88, 0.88, 0.82),
}
_SKY_COLOR = (0.70, 0.80, 0.95)
_LIGHT_DIR = np.array([0.35, 0.25, -0.90])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


def _surface_uv(points, normals):
    """Two tangent-plane coordinates per hit for texturing."""
    an = np.abs(normals)
    dominant = np.argmax(an, axis=1)
    u = np.where(dominant == 0, points[:, 1], points[:, 0])
    v = np.where(dominant == 2, points[:, 1], points[:, 2])
    return u, v


def _hash01(ix, iy):
    h = np.sin(ix * 12.9898 + iy * 78.233) * 43758.5453
    return h - np.floor(h)


def shade(points, normals, labels, hit, texture="checker", freq=2.0):
    n_rays = len(points)
    color = np.tile(np.asarray(_SKY_COLOR), (n_rays, 1))
    if np.any(hit):
        base = np.array([_BASE_COLOR[c] for c in range(4)])[labels[hit]]
        u, v = _surface_uv(points[hit], normals[hit])
        iu, iv = np.floor(u * freq), np.floor(v * freq)
        if texture == "checker":
            tex = np.where((iu + iv) % 2 == 0, 1.0, 0.62)
        else:
            tex = 0.55 + 0.45 * _hash01(iu, iv)
        lam = np.clip(-normals[hit] @ _LIGHT_DIR, 0.0, None)
        shade_f = 0.35 + 0.65 * lam
        color[hit] = np.clip(base * (tex * shade_f)[:, None], 0.0, 1.0)
    return color


# ------------------------------------------------------------- cameras

def look_at_camera(position, target, width, height, hfov_deg, up=(0, 0, 1.0)):
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(forward, (0, 1.0, 0))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # world -> cam rows
    fx = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
    return Camera(
        width=width, height=height, fx=fx, fy=fx,
        cx=width / 2.0, cy=height / 2.0,
        rotation=rot, translation=-rot @ position,
    )


def _indoor_cameras(spec: SceneSpec):
    ex, ey, ez = spec.extents
    center = np.array([ex / 2, ey / 2, ez / 2])
    radius = 0.35 * min(ex, ey)
    # Three pitch tiers (level, down, up) interleaved around the ring, all
    # looking inward across the center: each surface patch is observed by
    # cameras on the far side of the ring, so walls, floor and ceiling are
    # covered near-completely (the level tier picks up shallow-elevation
    # regions beyond the steep tiers' reach).
    pitch = [0.0, -math.radians(48.0), math.radians(48.0)]
    cams = []
    for i in range(spec.n_cameras):
        th = 2 * math.pi * i / spec.n_cameras
        outward = np.array([math.cos(th), math.sin(th), 0.0])
        pos = center + radius * outward
        pos[2] = 0.50 * ez
        p = pitch[i % 3]
        target = pos - math.cos(p) * outward
        target[2] = pos[2] + math.sin(p)
        cams.append(look_at_camera(pos, target, spec.width, spec.height,
                                   spec.hfov_deg))
    return cams


def _urban_scene(spec: SceneSpec, rng):
    half = max(spec.extents[0], spec.extents[1])
    prims = [_Ground(half)]
    n_b = int(rng.integers(2, 5))
    boxes = []
    for _ in range(n_b):
        size = rng.uniform([0.6, 0.6, 0.8], [1.2, 1.2, 1.8])
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.2, 0.45) * half
        center = np.array([dist * math.cos(ang), dist * math.sin(ang),
                           size[2] / 2])
        yaw = rng.uniform(0.15, math.pi / 2 - 0.15)  # non-orthogonal
        b = BoxSpec(center=tuple(center), size=tuple(size), yaw=yaw,
                    side_label=CLS_WALL, top_label=CLS_OTHER)
        boxes.append(b)
        prims.append(_Box(b))
    return prims, boxes


def _urban_cameras(spec: SceneSpec, half):
    cams = []
    radius = 0.75 * half
    for i in range(spec.n_cameras):
        th = 2 * math.pi * i / spec.n_cameras
        pos = np.array([radius * math.cos(th), radius * math.sin(th), 1.6])
        target = np.array([0.0, 0.0, 0.6])
        cams.append(look_at_camera(pos, target, spec.width, spec.height,
                                   spec.hfov_deg))
    return cams


# ------------------------------------------------------------- GT meshes

def _quad(vertices, faces, labels, corners, label):
    base = len(vertices)
    vertices.extend(corners)
    faces.append((base, base + 1, base + 2))
    faces.append((base, base + 2, base + 3))
    labels.extend([label] * 4)


def _box_faces(center, half, rot, side_label, top_label, vertices, faces, labels):
    for axis in range(3):
        for sgn in (-1.0, 1.0):
            ax1, ax2 = [a for a in range(3) if a != axis]
            corners = []
            for s1, s2 in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                c = np.zeros(3)
                c[axis] = sgn * half[axis]
                c[ax1] = s1 * half[ax1]
                c[ax2] = s2 * half[ax2]
                corners.append(center + rot @ c)
            lab = top_label if axis == 2 else side_label
            _quad(vertices, faces, labels, corners, lab)


def build_gt_mesh(spec: SceneSpec, prims) -> TriangleMesh:
    vertices, faces, labels = [], [], []
    if spec.mode == "indoor":
        ex, ey, ez = spec.extents
        _quad(vertices, faces, labels,
              [(0, 0, 0), (ex, 0, 0), (ex, ey, 0), (0, ey, 0)], CLS_FLOOR)
        _quad(vertices, faces, labels,
              [(0, 0, ez), (ex, 0, ez), (ex, ey, ez), (0, ey, ez)], CLS_CEILING)
        _quad(vertices, faces, labels,
              [(0, 0, 0), (ex, 0, 0), (ex, 0, ez), (0, 0, ez)], CLS_WALL)
        _quad(vertices, faces, labels,
              [(0, ey, 0), (ex, ey, 0), (ex, ey, ez), (0, ey, ez)], CLS_WALL)
        _quad(vertices, faces, labels,
              [(0, 0, 0), (0, ey, 0), (0, ey, ez), (0, 0, ez)], CLS_WALL)
        _quad(vertices, faces, labels,
              [(ex, 0, 0), (ex, ey, 0), (ex, ey, ez), (ex, 0, ez)], CLS_WALL)
    for p in prims:
        if isinstance(p, _Ground):
            h = p.half
            _quad(vertices, faces, labels,
                  [(-h, -h, 0), (h, -h, 0), (h, h, 0), (-h, h, 0)], CLS_FLOOR)
        elif isinstance(p, _Box):
            _box_faces(p.center, p.half, p.rot, p.side_label, p.top_label,
                       vertices, faces, labels)
    return TriangleMesh(np.array(vertices), np.array(faces),
                        np.array(labels))


# ------------------------------------------------------------- generation

def _apply_normal_noise(normals, hit, sigma_deg, rng):
    if sigma_deg <= 0:
        return normals
    out = normals.copy()
    idx = np.flatnonzero(hit)
    angles = np.radians(sigma_deg) * rng.standard_normal(len(idx))
    # rotate about a random tangent axis by the sampled angle
    rand = rng.standard_normal((len(idx), 3))
    n = normals[idx]
    tang = rand - n * np.sum(rand * n, axis=1, keepdims=True)
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
    out[idx] = np.cos(angles)[:, None] * n + np.sin(angles)[:, None] * tang
    return out


def generate(spec: SceneSpec) -> SceneDataset:
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "indoor":
        room = _RoomInterior(spec.extents)
        furniture = []
        for f in spec.furniture:
            furniture.append(_Sphere(f) if isinstance(f, SphereSpec) else _Box(f))
        prims = [room] + furniture
        cams = _indoor_cameras(spec)
        for i, cam in enumerate(cams):
            c = cam.center
            if not room.contains(c):
                raise GenerationError(f"camera {i} outside the room at {c}")
            for p in furniture:
                if p.contains(c):
                    raise GenerationError(f"camera {i} inside furniture at {c}")
        planes_gt = PlaneIndicators(
            np.array([0.0, 0, 1.0]), d_f=0.0, d_c=spec.extents[2])
    else:
        prims, _ = _urban_scene(spec, rng)
        half = max(spec.extents[0], spec.extents[1])
        cams = _urban_cameras(spec, half)
        for i, cam in enumerate(cams):
            c = cam.center
            if c[2] <= 0:
                raise GenerationError(f"camera {i} below ground at {c}")
            for p in prims:
                if p.contains(c):
                    raise GenerationError(f"camera {i} inside a building at {c}")
        planes_gt = PlaneIndicators(
            np.array([0.0, 0, 1.0]), d_f=0.0, d_c=0.0, has_ceiling=False)

    v = len(cams)
    h, w = spec.height, spec.width
    images = np.zeros((v, h, w, 3), dtype=np.uint8)
    depths = np.zeros((v, h, w), dtype=np.float32)
    normals = np.zeros((v, h, w, 3), dtype=np.float32)
    sems = np.zeros((v, h, w), dtype=np.uint8)
    gt_depths = []
    for vi, cam in enumerate(cams):
        rays = cam.pixel_rays(cam.pixel_grid()).reshape(-1, 3)
        t, nrm, lab, hit = trace(prims, cam.center, rays)
        pts = cam.center + np.where(hit, t, 0.0)[:, None] * rays
        color = shade(pts, nrm, lab, hit, spec.texture, spec.checker_freq)
        images[vi] = np.round(color.reshape(h, w, 3) * 255).astype(np.uint8)
        d = np.where(hit, t, 0.0)
        gt_depths.append(d.reshape(h, w).copy())
        if spec.depth_sigma > 0:
            d = d * (1.0 + spec.depth_sigma * rng.standard_normal(d.shape) * hit)
        depths[vi] = d.reshape(h, w).astype(np.float32)
        nrm = _apply_normal_noise(nrm, hit, spec.normal_sigma_deg, rng)
        normals[vi] = nrm.reshape(h, w, 3).astype(np.float32)
        labels_px = lab.copy()
        if spec.label_flip_rate > 0:
            flip = rng.uniform(size=labels_px.shape) < spec.label_flip_rate
            shift = rng.integers(1, 4, size=labels_px.shape)
            labels_px = np.where(flip, (labels_px + shift) % 4, labels_px)
        labels_px[~hit] = CLS_OTHER
        sems[vi] = labels_px.reshape(h, w).astype(np.uint8)

    # sparse surface points with multi-view pixel correspondences
    points, point_labels, point_obs = [], [], []
    attempts = 0
    while len(points) < spec.n_points and attempts < spec.n_points * 20:
        attempts += 1
        vi = int(rng.integers(0, v))
        px = rng.uniform([0, 0], [w - 1, h - 1])
        ray = cams[vi].pixel_rays(px[None, :])
        t, _, lab, hit = trace(prims, cams[vi].center, ray)
        if not hit[0]:
            continue
        p = cams[vi].center + t[0] * ray[0]
        obs = []
        for vj, cam in enumerate(cams):
            uv, z = cam.project(p[None, :])
            u_j, v_j = uv[0]
            if z[0] <= 1e-6:
                continue
            ui, vj_i = int(round(u_j)), int(round(v_j))
            if not (0 <= ui < w and 0 <= vj_i < h):
                continue
            ref = gt_depths[vj][vj_i, ui]
            if ref > 0 and abs(z[0] - ref) <= 0.02 * ref + 1e-4:
                obs.append((vj, float(u_j), float(v_j)))
        if not obs:
            continue
        points.append(p)
        point_labels.append(int(lab[0]))
        point_obs.append(obs)

    return SceneDataset(
        cameras=cams,
        images=images,
        depths=depths,
        normals=normals,
        sems=sems,
        points=np.array(points).reshape(-1, 3),
        point_labels=np.array(point_labels, dtype=np.int64),
        point_obs=point_obs,
        mesh_gt=build_gt_mesh(spec, prims),
        planes_gt=planes_gt,
        mode=spec.mode,
    )
