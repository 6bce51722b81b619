"""End-to-end evaluation of a trained state against a dataset.

Renders every view for image metrics, fuses rendered depth into a TSDF for
mesh extraction, and compares against the dataset's reference mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import TrainState
from .dataset_io import SceneDataset
from .geometry import CLS_OTHER
from .meshing import (
    GeoMetrics,
    TriangleMesh,
    TsdfVolume,
    extract_mesh,
    geo_metrics,
    psnr,
    semantic_iou,
)
from .trainer import render_view


def subset_views(dataset: SceneDataset, view_ids) -> SceneDataset:
    """Dataset restricted to the given views (point observations are
    remapped to the new view indices; unobserved entries drop out)."""
    view_ids = list(view_ids)
    remap = {v: i for i, v in enumerate(view_ids)}
    obs = [
        [(remap[v], u, w) for (v, u, w) in per_point if v in remap]
        for per_point in dataset.point_obs
    ]
    return SceneDataset(
        cameras=[dataset.cameras[v] for v in view_ids],
        images=dataset.images[view_ids],
        depths=dataset.depths[view_ids],
        normals=dataset.normals[view_ids],
        sems=dataset.sems[view_ids],
        points=dataset.points,
        point_labels=dataset.point_labels,
        point_obs=obs,
        mesh_gt=dataset.mesh_gt,
        planes_gt=dataset.planes_gt,
        mode=dataset.mode,
    )


def fuse_mesh(
    state: TrainState,
    cameras,
    bounds_points: np.ndarray,
    voxel_size: float = 0.02,
    margin: float = 0.06,
    acc_threshold: float = 0.5,
) -> TriangleMesh:
    """TSDF-fuse rendered depth from every camera and extract a mesh.

    The volume covers the bounding box of `bounds_points` (world units)
    plus a margin.
    """
    lo = bounds_points.min(axis=0) - margin
    hi = bounds_points.max(axis=0) + margin
    vol = TsdfVolume(lo, hi - lo, voxel_size)
    for cam in cameras:
        buffers, depth_scale = render_view(state, cam)
        acc = buffers.acc_alpha
        valid = acc >= acc_threshold
        safe = np.where(valid, acc, 1.0)
        depth = np.where(valid, buffers.depth / safe, 0.0) * depth_scale
        vol.integrate(depth, cam, depth_valid=valid)
    return extract_mesh(vol)


@dataclass
class EvalReport:
    psnr: float
    psnr_per_view: list
    iou: dict  # class id -> IoU over all rendered views
    geo: GeoMetrics
    mesh: TriangleMesh

    def summary(self) -> str:
        ious = " ".join(f"iou[{c}]={v:.4f}" for c, v in sorted(self.iou.items()))
        g = self.geo
        return (
            f"psnr={self.psnr:.2f} {ious} acc={g.acc:.4f} comp={g.comp:.4f} "
            f"cd={g.cd:.4f} f1={g.f1:.4f}"
        )


def evaluate_state(
    state: TrainState,
    dataset: SceneDataset,
    tsdf_voxel: float = 0.02,
    threshold: float = 0.05,
    samples: int = 200000,
    seed: int = 0,
    classes=(1, 2, 3),
    acc_threshold: float = 0.5,
    psnr_views=None,
    iou_views=None,
) -> EvalReport:
    """Image metrics are computed per view; `psnr_views` / `iou_views`
    restrict which views contribute (default: all)."""
    psnr_views = set(range(dataset.n_views)) if psnr_views is None else set(psnr_views)
    iou_views = set(range(dataset.n_views)) if iou_views is None else set(iou_views)
    psnrs = []
    pred_labels = []
    gt_labels = []
    targets = dataset.images_float()
    for vi, cam in enumerate(dataset.cameras):
        if vi not in psnr_views and vi not in iou_views:
            continue
        buffers, _ = render_view(state, cam)
        if vi in psnr_views:
            psnrs.append(psnr(buffers.color, targets[vi]))
        if vi in iou_views:
            acc = buffers.acc_alpha
            covered = acc >= acc_threshold
            lab = np.argmax(buffers.sem, axis=-1)
            lab[~covered] = CLS_OTHER
            pred_labels.append(lab.ravel())
            gt_labels.append(dataset.sems[vi].ravel())
    iou = semantic_iou(
        np.concatenate(pred_labels), np.concatenate(gt_labels), classes=classes
    )
    mesh = fuse_mesh(state, dataset.cameras, dataset.points,
                     voxel_size=tsdf_voxel, acc_threshold=acc_threshold)
    geo = geo_metrics(mesh, dataset.mesh_gt, samples=samples,
                      threshold=threshold, seed=seed)
    return EvalReport(
        psnr=float(np.mean(psnrs)),
        psnr_per_view=[float(p) for p in psnrs],
        iou=iou,
        geo=geo,
        mesh=mesh,
    )
