"""Optimization loop: parameter registry, Adam updates, schedule gates,
densification cadence, plane re-initialization checks, checkpointing, and a
finite-difference gradient-check harness.

Gradient flow per step: pixel-level loss gradients (color, normalized depth,
normal, semantics, accumulated alpha) and blend-record gradients (distortion,
normal consistency) are routed through the rasterizer backward; direct
per-surfel contributions from the planar regularizer and the normal
consistency term are added on top; the decoder backward then produces grid
and MLP gradients.  Quantities defined as constants of the iterate
(scale/shift alignment, semantic blend weights, regularizer memberships,
validity masks) receive no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import TrainState
from .dataset_io import SceneDataset
from .decoders import (
    GEO_PARAM_KEYS,
    SEM_PARAM_KEYS,
    AttributeDecoder,
    DecodeError,
    SurfelGrads,
    init_decoder_params,
)
from .geometry import (
    CLS_CEILING,
    CLS_FLOOR,
    Camera,
    InvalidInputError,
    depth_to_normal_with_grad,
)
from .grid import SparseVoxelGrid, densify_and_prune, init_from_points
from .losses import (
    LossReport,
    LossWeights,
    align_scale_shift,
    loss_depth,
    loss_distortion,
    loss_normal,
    loss_normal_consistency,
    loss_rgb,
    loss_semantic,
    total_loss,
)
from .planes import (
    LabeledPointCloud,
    PlaneFitError,
    PlaneGrads,
    PlaneIndicators,
    ceiling_offset,
    fit_floor_ransac,
    init_plane_indicators,
    loss_2d_local,
    loss_3d_global,
    maybe_reinit,
)
from .rasterize import RenderConfig, _surfel_sigma, render, render_backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

REFERENCE_TOTAL_STEPS = 40000


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> np.ndarray:
    """One bias-corrected Adam update, in place on param / m / v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class _Optimizer:
    """Named-parameter Adam state with row migration across grid resizes."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        adam_step(param, grad, self.m[name], self.v[name], self.t[name], lr)

    def migrate_rows(self, name: str, keep_index: np.ndarray, new_shape: tuple):
        """Keep state rows of surviving voxels, zero state for new ones."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            fresh = np.zeros(new_shape)
            fresh[: len(keep_index)] = store[name][keep_index]
            store[name] = fresh

    def reset(self, name: str):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)


@dataclass
class TrainConfig:
    total_steps: int = REFERENCE_TOTAL_STEPS
    voxel_size: float = 0.01  # in normalized scene units
    K: int = 10
    feature_dim: int = 32
    hidden: int = 64
    seed: int = 0
    init_opacity: float = 0.25
    lr_features: float = 2.5e-3
    lr_offsets: float = 1e-2
    offset_lr_final_ratio: float = 1e-4
    lr_scaling: float = 5e-3
    lr_mlp: float = 2e-3
    lr_planes: float = 1e-3
    densify_start: int = 1500
    densify_end: int = 20000
    densify_every: int = 100
    grow_threshold: float = 2e-4
    prune_threshold: float = 0.005
    reg3d_start: int = 7000
    reg2d_start: int = 20000
    # distortion is a depth-concentration term; applying it before the
    # surfels roughly cover the scene collapses opacity, so it starts after
    # a warmup (same role as its delayed start in standard surfel splatting)
    distortion_start: int = 3000
    plane_reinit_every: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    # composite the photometric loss over a fresh random background color
    # each step; removes the transparent-surfel ambiguity and drives
    # accumulated alpha to 1 on covered surfaces
    random_background: bool = True
    normalize: bool = True
    log_every: int = 100
    snapshot_every: int = 100

    def __post_init__(self):
        if self.total_steps < 0:
            raise InvalidInputError("total_steps must be nonnegative")
        if not (self.reg3d_start <= self.reg2d_start <= self.total_steps):
            raise InvalidInputError(
                "schedule must satisfy reg3d_start <= reg2d_start <= total_steps"
            )
        for name in ("voxel_size", "lr_features", "lr_offsets", "lr_scaling",
                     "lr_mlp", "lr_planes", "offset_lr_final_ratio"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.densify_every < 1 or self.plane_reinit_every < 1:
            raise InvalidInputError("cadences must be at least 1")

    @classmethod
    def scaled(cls, total_steps: int, **overrides) -> "TrainConfig":
        """Config with all schedule breakpoints scaled from the reference
        40000-step schedule down (or up) to `total_steps`."""
        r = total_steps / REFERENCE_TOTAL_STEPS
        base = cls()
        points = dict(
            total_steps=total_steps,
            densify_start=max(1, round(base.densify_start * r)),
            densify_end=max(1, round(base.densify_end * r)),
            densify_every=max(10, round(base.densify_every * r)),
            reg3d_start=max(0, round(base.reg3d_start * r)),
            reg2d_start=max(0, round(base.reg2d_start * r)),
            distortion_start=max(0, round(base.distortion_start * r)),
            plane_reinit_every=max(25, round(base.plane_reinit_every * r)),
        )
        points.update(overrides)
        return cls(**points)

    def offset_lr(self, step: int) -> float:
        frac = step / max(1, self.total_steps)
        return self.lr_offsets * self.offset_lr_final_ratio**frac


@dataclass
class TrainResult:
    state: TrainState
    log_lines: list
    aborted: bool = False
    abort_reason: str = None
    final_report: LossReport = None


def scene_normalization(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Center and scale mapping the sparse-point bounding box to unit
    diagonal: p_norm = (p - center) / scale."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.linalg.norm(hi - lo))
    if scale <= 0:
        scale = 1.0
    return center, scale


def normalize_camera(cam: Camera, center: np.ndarray, scale: float) -> Camera:
    """Camera observing the normalized scene: pixels are unchanged,
    camera-z depths divide by scale."""
    t = (cam.translation + cam.rotation @ center) / scale
    return Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
                  cam.rotation, t)


def _normalized_depth(buffers, valid: np.ndarray):
    acc = buffers.acc_alpha
    safe = np.where(valid, acc, 1.0)
    dn = np.where(valid, buffers.depth / safe, 0.0)
    return dn, safe


def compute_view_losses(
    batch,
    cam: Camera,
    buffers,
    target: np.ndarray,
    depth_prior: np.ndarray,
    depth_prior_valid: np.ndarray,
    normal_prior: np.ndarray,
    normal_prior_valid: np.ndarray,
    labels: np.ndarray,
    planes: PlaneIndicators,
    weights: LossWeights,
    reg3d_on: bool,
    reg2d_on: bool,
    render_cfg: RenderConfig = None,
    include_rgb: bool = True,
    background: np.ndarray = None,
) -> tuple[LossReport, SurfelGrads, PlaneGrads]:
    """Per-view loss report plus fully weighted gradients.

    Returns (report, surfel_grads, plane_grads); report fields are the
    unweighted per-term values, gradients carry the loss weights.  Rendered
    depth is normalized by accumulated alpha on pixels with acc >= 0.5
    (gradient flows into both the depth and alpha buffers).  When
    `background` is given, the photometric loss sees the blend composited
    over that color, so unexplained transparency is penalized.
    """
    report = LossReport()
    acc = buffers.acc_alpha
    valid = acc >= 0.5
    dn, safe = _normalized_depth(buffers, valid)

    d_color = d_normal = d_sem = None
    g_dn = np.zeros_like(dn)
    g_acc = np.zeros_like(acc)
    use_depth_chain = False
    use_acc = False
    nrec = len(buffers.rec_gid)
    d_rec_omega = np.zeros(nrec)
    d_rec_z = None
    direct_frame_n = None
    sg3 = None
    plane_grads = PlaneGrads(np.zeros(3), 0.0, 0.0)

    if include_rgb:
        if background is not None:
            comp = buffers.color + (1.0 - acc)[..., None] * background
            report.rgb, d_color = loss_rgb(comp, target, weights.ssim_mix)
            g_acc -= d_color @ background
            use_acc = True
        else:
            report.rgb, d_color = loss_rgb(buffers.color, target,
                                           weights.ssim_mix)

    if weights.depth > 0 and depth_prior is not None:
        mask_d = valid & depth_prior_valid
        report.depth, g = loss_depth(dn, depth_prior, mask_d)
        g_dn += weights.depth * g
        use_depth_chain = True

    need_nd = (weights.normal > 0 and normal_prior is not None) or (
        weights.normal_consistency > 0
    )
    nd = nd_valid = nd_back = None
    g_nd_total = None
    if need_nd:
        nd, nd_valid, nd_back = depth_to_normal_with_grad(cam, dn, valid)
        g_nd_total = np.zeros_like(nd)

    if weights.normal > 0 and normal_prior is not None:
        mask_n = valid & normal_prior_valid & nd_valid
        report.normal, g_n, g_nd1 = loss_normal(
            buffers.normal, nd, normal_prior, mask_n
        )
        d_normal = weights.normal * g_n
        g_nd_total += weights.normal * g_nd1

    if weights.semantic > 0 and labels is not None:
        report.semantic, g_s = loss_semantic(buffers.sem, acc, labels)
        d_sem = weights.semantic * g_s

    if weights.distortion > 0:
        report.distortion, g_o, g_z = loss_distortion(buffers)
        d_rec_omega += weights.distortion * g_o
        d_rec_z = weights.distortion * g_z

    if weights.normal_consistency > 0:
        sigma = _surfel_sigma(batch, cam.center)
        oriented = sigma[:, None] * batch.frame[:, :, 2]
        report.normal_consistency, g_o, g_surf_n, g_nd2 = loss_normal_consistency(
            buffers, oriented, nd, valid & nd_valid
        )
        d_rec_omega += weights.normal_consistency * g_o
        g_nd_total += weights.normal_consistency * g_nd2
        direct_frame_n = weights.normal_consistency * sigma[:, None] * g_surf_n

    if reg3d_on and weights.reg > 0:
        report.reg3d, sg3, pg3, _ = loss_3d_global(batch, planes)
        plane_grads = PlaneGrads(
            weights.reg * pg3.n_g_raw,
            weights.reg * pg3.d_f,
            weights.reg * pg3.d_c,
        )

    if reg2d_on and weights.reg > 0:
        report.reg2d, g2 = loss_2d_local(dn, acc, buffers.sem, cam, planes)
        g_dn += weights.reg * g2
        use_depth_chain = True

    if g_nd_total is not None and np.any(g_nd_total):
        g_dn += nd_back(g_nd_total)
        use_depth_chain = True

    d_depth = d_acc = None
    if use_depth_chain:
        d_depth = np.where(valid, g_dn / safe, 0.0)
        g_acc += np.where(valid, -g_dn * dn / safe, 0.0)
        use_acc = True
    if use_acc:
        d_acc = g_acc

    sg = render_backward(
        batch, cam, buffers, render_cfg,
        d_color=d_color, d_depth=d_depth, d_normal=d_normal, d_sem=d_sem,
        d_acc=d_acc, d_rec_omega=d_rec_omega if np.any(d_rec_omega) else None,
        d_rec_z=d_rec_z,
    )
    if direct_frame_n is not None:
        sg.frame[:, :, 2] += direct_frame_n
    if sg3 is not None:
        sg.position += weights.reg * sg3.position
        sg.frame += weights.reg * sg3.frame
    return report, sg, plane_grads


def _screen_grad_stat(batch, cam: Camera, sg: SurfelGrads, near: float):
    """Per-surfel screen-space positional gradient magnitude (inf-norm):
    |dL/dpixel| estimated from the world-space position gradient."""
    pc = cam.to_cam(batch.position)
    z = pc[:, 2]
    g_cam = sg.position @ cam.rotation.T
    du = np.abs(g_cam[:, 0]) * z / cam.fx
    dv = np.abs(g_cam[:, 1]) * z / cam.fy
    stat = np.maximum(du, dv)
    stat[z <= near] = 0.0
    return stat


def _fit_planes_from_gaussians(
    batch, voxel_size: float, seed: int
) -> PlaneIndicators:
    """Fresh plane fit from the current Gaussians' positions and semantic
    argmax labels; raises PlaneFitError when underdetermined."""
    labels = np.argmax(batch.sem, axis=1)
    floor = batch.position[labels == CLS_FLOOR]
    non_floor = batch.position[labels != CLS_FLOOR]
    n_g, d_f = fit_floor_ransac(
        floor, non_floor, iters=256, inlier_tol=2.0 * voxel_size, seed=seed
    )
    d_c = ceiling_offset(batch.position[labels == CLS_CEILING], n_g)
    if d_c is None or abs(d_c + d_f) <= 1e-6:
        return PlaneIndicators(n_g, d_f, 0.0, has_ceiling=False)
    return PlaneIndicators(n_g, d_f, d_c, has_ceiling=True)


_VOXEL_PARAMS = ("geom_feat", "sem_feat", "offsets", "log_scaling")


def train(dataset: SceneDataset, config: TrainConfig, progress=None) -> TrainResult:
    """Optimize grid, decoders and plane indicators against one dataset.

    Deterministic given (dataset, config).  On a non-finite loss term the loop
    aborts, names the term, and returns the last good snapshot.
    """
    rng = np.random.default_rng(config.seed)
    w = config.weights
    render_cfg = RenderConfig()

    if config.normalize:
        center, scale = scene_normalization(dataset.points)
    else:
        center, scale = np.zeros(3), 1.0
    points_n = (dataset.points - center) / scale
    cams = [normalize_camera(c, center, scale) for c in dataset.cameras]
    depth_priors = (dataset.depths / scale).astype(np.float64)
    depth_valids = dataset.depths > 0
    normal_priors = dataset.normals.astype(np.float64)
    normal_valids = np.linalg.norm(normal_priors, axis=-1) > 0.5
    label_maps = dataset.sems.astype(np.int64)
    targets = dataset.images_float()

    cloud = LabeledPointCloud(
        points_n, dataset.point_labels, np.ones(len(points_n))
    )
    planes = init_plane_indicators(
        cloud, inlier_tol=2.0 * config.voxel_size, seed=config.seed
    )
    grid = init_from_points(
        points_n, config.voxel_size, config.K, config.seed, config.feature_dim
    )
    decoder = AttributeDecoder(
        init_decoder_params(config.feature_dim, config.K, config.hidden,
                            config.seed + 1,
                            init_opacity=config.init_opacity)
    )
    state = TrainState(
        grid=grid, decoder_params=decoder.params, planes=planes,
        norm_center=center, norm_scale=scale, hidden=config.hidden,
        mode=dataset.mode, step=0,
    )
    last_good = state.copy()
    opt = _Optimizer()

    ng_raw = planes.n_g.copy()
    d_f = np.array([planes.d_f])
    d_c = np.array([planes.d_c])

    slot_acc = np.zeros((grid.num_voxels, config.K))
    acc_steps = 0
    log_lines = []
    report = None
    order = []

    def abort(reason, step):
        return TrainResult(last_good, log_lines, True,
                           f"{reason} at step {step}", report)

    for step in range(config.total_steps):
        if not order:
            order = list(rng.permutation(dataset.n_views))
        view = order.pop(0)
        cam = cams[view]
        reg3d_on = step >= config.reg3d_start
        reg2d_on = step >= config.reg2d_start
        w_step = (w if step >= config.distortion_start
                  else replace(w, distortion=0.0))

        try:
            batch = decoder.forward(grid, cam.center)
        except DecodeError as e:
            return abort(str(e), step)
        bg = rng.uniform(size=3) if config.random_background else None
        buffers = render(batch, cam, render_cfg)
        report, sg, pg = compute_view_losses(
            batch, cam, buffers, targets[view],
            depth_priors[view], depth_valids[view],
            normal_priors[view], normal_valids[view],
            label_maps[view], planes, w_step, reg3d_on, reg2d_on, render_cfg,
            background=bg,
        )
        total_loss(report, w_step)
        for name in LossReport.COLUMNS:
            if not math.isfinite(getattr(report, name)):
                return abort(f"non-finite loss term '{name}'", step)

        slot_acc += _screen_grad_stat(batch, cam, sg, render_cfg.near).reshape(
            grid.num_voxels, config.K
        )
        acc_steps += 1

        grads = decoder.backward(sg)
        opt.step("geom_feat", grid.geom_feat, grads["geom_feat"],
                 config.lr_features)
        opt.step("sem_feat", grid.sem_feat, grads["sem_feat"],
                 config.lr_features)
        opt.step("offsets", grid.offsets, grads["offsets"],
                 config.offset_lr(step))
        opt.step("log_scaling", grid.log_scaling, grads["log_scaling"],
                 config.lr_scaling)
        for k in GEO_PARAM_KEYS + SEM_PARAM_KEYS:
            opt.step(k, decoder.params[k], grads[k], config.lr_mlp)

        if reg3d_on and w.reg > 0:
            opt.step("plane_n_g", ng_raw, pg.n_g_raw, config.lr_planes)
            ng_raw /= np.linalg.norm(ng_raw)
            opt.step("plane_d_f", d_f, np.array([pg.d_f]), config.lr_planes)
            if planes.has_ceiling:
                opt.step("plane_d_c", d_c, np.array([pg.d_c]),
                         config.lr_planes)
            try:
                planes = PlaneIndicators(ng_raw.copy(), float(d_f[0]),
                                         float(d_c[0]), planes.has_ceiling)
            except InvalidInputError:
                return abort("degenerate plane configuration", step)
            state.planes = planes

        if (
            reg3d_on
            and (step + 1) % config.plane_reinit_every == 0
        ):
            try:
                fresh = _fit_planes_from_gaussians(
                    batch, config.voxel_size, config.seed + step
                )
            except PlaneFitError:
                fresh = None
            if fresh is not None:
                new = maybe_reinit(planes, fresh)
                if new is not planes:
                    planes = new
                    state.planes = planes
                    ng_raw = planes.n_g.copy()
                    d_f = np.array([planes.d_f])
                    d_c = np.array([planes.d_c])
                    for name in ("plane_n_g", "plane_d_f", "plane_d_c"):
                        opt.reset(name)

        if (
            config.densify_start <= step <= config.densify_end
            and (step + 1) % config.densify_every == 0
            and acc_steps > 0
        ):
            slot_scores = slot_acc / acc_steps
            grad_stats = slot_scores.max(axis=1)
            res = densify_and_prune(
                grid, grad_stats, batch.opacity.reshape(-1, config.K), step,
                rng,
                grow_threshold=config.grow_threshold,
                prune_threshold=config.prune_threshold,
                window=(config.densify_start, config.densify_end),
                slot_scores=slot_scores,
            )
            if res.added or res.removed:
                for name in _VOXEL_PARAMS:
                    shape = (grid.num_voxels,) + opt.m[name].shape[1:]
                    opt.migrate_rows(name, res.keep_index, shape)
            slot_acc = np.zeros((grid.num_voxels, config.K))
            acc_steps = 0

        state.step = step + 1
        if (step + 1) % config.snapshot_every == 0:
            last_good = state.copy()
        if (step + 1) % config.log_every == 0 or step + 1 == config.total_steps:
            log_lines.append(report.log_line(step + 1))
        if progress is not None:
            progress(step, report)

    return TrainResult(state, log_lines, False, None, report)


def render_view(state: TrainState, cam: Camera, render_cfg: RenderConfig = None):
    """Render one original-world camera from a trained state.

    Returns (buffers, depth_scale): multiply the rendered depth by
    depth_scale to get world-unit depth.
    """
    cam_n = normalize_camera(cam, state.norm_center, state.norm_scale)
    decoder = AttributeDecoder(state.decoder_params)
    batch = decoder.forward(state.grid, cam_n.center)
    buffers = render(batch, cam_n, render_cfg or RenderConfig())
    return buffers, state.norm_scale


# ---------------------------------------------------------------------------
# gradient-check harness
# ---------------------------------------------------------------------------

_TERMS = ("rgb", "depth", "normal", "semantic", "distortion",
          "normal_consistency", "reg3d", "reg2d")
_GROUP_OF = {"geom_feat": "geom_feat", "sem_feat": "sem_feat",
             "offsets": "offsets", "log_scaling": "log_scaling",
             "plane_n_g": "planes", "plane_d_f": "planes",
             "plane_d_c": "planes"}
_GROUP_OF.update({k: "mlp_geo" for k in GEO_PARAM_KEYS})
_GROUP_OF.update({k: "mlp_sem" for k in SEM_PARAM_KEYS})


@dataclass
class GradCheckEntry:
    term: str
    group: str
    key: str
    index: int
    analytic: float
    fd: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def failures(self):
        return [e for e in self.entries if e.rel_err > self.tolerance]

    def worst_by_group(self) -> dict:
        out = {}
        for e in self.entries:
            cur = out.get((e.term, e.group), 0.0)
            out[(e.term, e.group)] = max(cur, e.rel_err)
        return out


class _Fixture:
    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.15, 0.85, size=(60, 3))
        # K=1: surfels from one voxel share features, so K>1 would give
        # near-coplanar siblings whose blend order ties under finite
        # perturbation; one surfel per voxel keeps depth gaps voxel-sized
        grid = init_from_points(pts, voxel_size=0.25, K=1, seed=seed,
                                feature_dim=8, feature_scale=0.3)
        if grid.num_voxels > 30:
            grid = SparseVoxelGrid(
                voxel_size=grid.voxel_size, K=grid.K,
                feature_dim=grid.feature_dim, cells=grid.cells[:30],
                geom_feat=grid.geom_feat[:30], sem_feat=grid.sem_feat[:30],
                offsets=grid.offsets[:30], log_scaling=grid.log_scaling[:30],
            )
        self.grid = grid
        self.decoder = AttributeDecoder(
            init_decoder_params(8, 1, hidden=16, seed=seed + 1,
                                init_opacity=0.35)
        )
        side = 12
        eye = np.array([0.5, -1.1, 0.6])
        fwd = np.array([0.5, 0.5, 0.5]) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * side / np.tan(np.radians(30.0))
        self.cam = Camera(side, side, f, f, side / 2 - 0.5, side / 2 - 0.5,
                          R, -R @ eye)
        self.background = rng.uniform(0.0, 1.0, size=3)
        self.depth_prior = rng.uniform(1.0, 2.2, size=(side, side))
        self.depth_prior_valid = np.ones((side, side), dtype=bool)
        npv = rng.standard_normal((side, side, 3))
        npv[..., 2] -= 1.5
        self.normal_prior = npv / np.linalg.norm(npv, axis=-1, keepdims=True)
        self.normal_prior_valid = np.ones((side, side), dtype=bool)
        self.labels = rng.integers(0, 4, size=(side, side))
        self.planes = PlaneIndicators(
            np.array([0.05, -0.02, 1.0]) / np.linalg.norm([0.05, -0.02, 1.0]),
            d_f=-0.12, d_c=0.85, has_ceiling=True,
        )
        self.ng_raw = self.planes.n_g.copy()
        self.d_f = np.array([self.planes.d_f])
        self.d_c = np.array([self.planes.d_c])
        # smooth config: no blending cutoffs, so every parameter is probed
        # away from the rasterizer's inclusion discontinuities
        self.render_cfg = RenderConfig(alpha_cutoff=0.0,
                                       term_transmittance=0.0)
        # photometric target with a guaranteed per-pixel offset from the
        # baseline composite: finite-difference probes then stay on one side
        # of every |rendered - target| kink
        _, buffers0 = self.forward()
        comp0 = (buffers0.color
                 + (1.0 - buffers0.acc_alpha)[..., None] * self.background)
        signs = np.where(rng.uniform(size=comp0.shape) < 0.5, -1.0, 1.0)
        self.target = comp0 + signs * rng.uniform(0.25, 0.5, size=comp0.shape)

    def planes_obj(self) -> PlaneIndicators:
        n = self.ng_raw / np.linalg.norm(self.ng_raw)
        return PlaneIndicators(n, float(self.d_f[0]), float(self.d_c[0]),
                               True)

    def forward(self):
        batch = self.decoder.forward(self.grid, self.cam.center)
        buffers = render(batch, self.cam, self.render_cfg, brute_force=True)
        return batch, buffers

    def param_array(self, key: str) -> np.ndarray:
        if key in ("geom_feat", "sem_feat", "offsets", "log_scaling"):
            return getattr(self.grid, key)
        if key == "plane_n_g":
            return self.ng_raw
        if key == "plane_d_f":
            return self.d_f
        if key == "plane_d_c":
            return self.d_c
        return self.decoder.params[key]


def _one_hot_weights(term: str) -> tuple[LossWeights, bool, bool, bool]:
    """(weights, include_rgb, reg3d_on, reg2d_on) enabling exactly one term."""
    w = dict(depth=0.0, normal=0.0, reg=0.0, semantic=0.0, distortion=0.0,
             normal_consistency=0.0, ssim_mix=0.2)
    include_rgb = term == "rgb"
    reg3d_on = term == "reg3d"
    reg2d_on = term == "reg2d"
    if term in ("reg3d", "reg2d"):
        w["reg"] = 1.0
    elif term != "rgb":
        w[term] = 1.0
    return LossWeights(**w), include_rgb, reg3d_on, reg2d_on


def _analytic_term_grads(fx: _Fixture, term: str):
    """Loss value and full parameter gradient dict for a single term."""
    weights, include_rgb, reg3d_on, reg2d_on = _one_hot_weights(term)
    batch, buffers = fx.forward()
    planes = fx.planes_obj()
    if term == "reg3d":
        loss, sg3, pg3, _ = loss_3d_global(batch, planes,
                                           n_g_raw=fx.ng_raw)
        sg = SurfelGrads(batch)
        sg.position += sg3.position
        sg.frame += sg3.frame
        pg = pg3
        report_val = loss
    else:
        report, sg, pg = compute_view_losses(
            batch, fx.cam, buffers, fx.target,
            fx.depth_prior, fx.depth_prior_valid,
            fx.normal_prior, fx.normal_prior_valid,
            fx.labels, planes, weights, reg3d_on, reg2d_on, fx.render_cfg,
            include_rgb=include_rgb,
            background=fx.background if term == "rgb" else None,
        )
        report_val = getattr(report, term)
    grads = fx.decoder.backward(sg)
    grads["plane_n_g"] = pg.n_g_raw if term == "reg3d" else np.zeros(3)
    grads["plane_d_f"] = np.array([pg.d_f if term == "reg3d" else 0.0])
    grads["plane_d_c"] = np.array([pg.d_c if term == "reg3d" else 0.0])
    return float(report_val), grads


def _frozen_context(fx: _Fixture):
    """Baseline quantities that the losses treat as constants."""
    batch, buffers = fx.forward()
    acc0 = buffers.acc_alpha.copy()
    valid0 = acc0 >= 0.5
    dn0, _ = _normalized_depth(buffers, valid0)
    nd0, nd_valid0, _ = depth_to_normal_with_grad(fx.cam, dn0, valid0)
    align0 = align_scale_shift(dn0, fx.depth_prior,
                               valid0 & fx.depth_prior_valid)
    counts = np.diff(buffers.px_start)
    rec_px0 = np.repeat(np.arange(fx.cam.height * fx.cam.width), counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_w0 = np.where(valid0, buffers.sem[..., 1] / acc0, 0.0)
        p_cf0 = np.where(
            valid0, (buffers.sem[..., 2] + buffers.sem[..., 3]) / acc0, 0.0
        )
    return dict(
        acc0=acc0, valid0=valid0, nd_valid0=nd_valid0, align0=align0,
        mask_d0=valid0 & fx.depth_prior_valid,
        mask_n0=valid0 & fx.normal_prior_valid & nd_valid0,
        rec_px0=rec_px0, rec_omega0=buffers.rec_omega.copy(),
        rec_gid0=buffers.rec_gid.copy(),
        reg2d_frozen=(p_w0, p_cf0, valid0),
        sem0=batch.sem.copy(),
    )


def _term_loss_frozen(fx: _Fixture, term: str, fz: dict) -> float:
    """Term value at the current parameters with stop-gradient quantities
    frozen at the baseline, for finite differencing."""
    batch = fx.decoder.forward(fx.grid, fx.cam.center)
    if term == "semantic":
        # frozen blend records, live per-surfel semantics, frozen acc
        npx = fx.cam.height * fx.cam.width
        Z = np.zeros((npx, 4))
        np.add.at(Z, fz["rec_px0"],
                  fz["rec_omega0"][:, None] * batch.sem[fz["rec_gid0"]])
        l, _ = loss_semantic(Z.reshape(fx.cam.height, fx.cam.width, 4),
                             fz["acc0"], fx.labels)
        return l
    if term == "reg3d":
        l, _, _, _ = loss_3d_global(batch, fx.planes_obj(),
                                    n_g_raw=fx.ng_raw,
                                    sem_weights=fz["sem0"])
        return l
    buffers = render(batch, fx.cam, fx.render_cfg, brute_force=True)
    valid0 = fz["valid0"]
    dn, _ = _normalized_depth(buffers, valid0)
    if term == "rgb":
        comp = buffers.color + (1.0 - buffers.acc_alpha)[..., None] * fx.background
        l, _ = loss_rgb(comp, fx.target, 0.2)
        return l
    if term == "depth":
        l, _ = loss_depth(dn, fx.depth_prior, fz["mask_d0"],
                          align=fz["align0"])
        return l
    if term == "normal":
        nd, _, _ = depth_to_normal_with_grad(fx.cam, dn, valid0)
        l, _, _ = loss_normal(buffers.normal, nd, fx.normal_prior,
                              fz["mask_n0"])
        return l
    if term == "distortion":
        l, _, _ = loss_distortion(buffers)
        return l
    if term == "normal_consistency":
        nd, _, _ = depth_to_normal_with_grad(fx.cam, dn, valid0)
        sigma = _surfel_sigma(batch, fx.cam.center)
        oriented = sigma[:, None] * batch.frame[:, :, 2]
        l, _, _, _ = loss_normal_consistency(
            buffers, oriented, nd, valid0 & fz["nd_valid0"]
        )
        return l
    if term == "reg2d":
        l, _ = loss_2d_local(dn, fz["acc0"], buffers.sem, fx.cam,
                             fx.planes_obj(),
                             frozen_weights=fz["reg2d_frozen"])
        return l
    raise ValueError(f"unknown term {term}")


def check_gradients(
    seed: int = 0,
    probes: int = 3,
    fd_step: float = 1e-4,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Finite-difference check of every loss term against every parameter
    group on a small fixture (<= 30 voxels, 12x12 image).

    Stop-gradient quantities are frozen at the baseline during the FD probes,
    matching the analytic convention.  The gravity direction is deliberately
    excluded from the 2D regularizer probe: it is a constant there by design.
    """
    fx = _Fixture(seed)
    fz = _frozen_context(fx)
    entries = []
    atol = 5e-8
    for term in _TERMS:
        _, grads = _analytic_term_grads(fx, term)
        for key, group in _GROUP_OF.items():
            if term == "reg2d" and group == "planes":
                continue
            arr = fx.param_array(key)
            g = np.asarray(grads[key], dtype=np.float64)
            flat_g = g.ravel()
            order = np.argsort(-np.abs(flat_g))
            idxs = list(order[: min(probes, flat_g.size)])
            for idx in idxs:
                flat = arr.reshape(-1)
                old = flat[idx]
                flat[idx] = old + fd_step
                hi = _term_loss_frozen(fx, term, fz)
                flat[idx] = old - fd_step
                lo = _term_loss_frozen(fx, term, fz)
                flat[idx] = old
                fd = (hi - lo) / (2.0 * fd_step)
                an = flat_g[idx]
                denom = max(abs(fd), abs(an))
                rel = 0.0 if denom < atol else abs(fd - an) / denom
                entries.append(
                    GradCheckEntry(term, group, key, int(idx), float(an),
                                   float(fd), float(rel))
                )
    return GradCheckReport(entries, tolerance)
