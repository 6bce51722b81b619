"""Sparse voxel feature grid: trainable features, offsets, scaling, growth/pruning.

Each occupied lattice cell holds a geometry feature, a semantic feature,
K local Gaussian offsets and one shared scaling factor.  Gaussian positions
are p = v + l * delta with v the voxel center.  The scaling is stored as
log(l) so it stays positive under unconstrained optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidInputError

DEFAULT_VOXEL_SIZE = 0.01
DEFAULT_K = 10
DEFAULT_FEATURE_DIM = 32


@dataclass
class SparseVoxelGrid:
    voxel_size: float
    K: int
    feature_dim: int
    cells: np.ndarray  # (N, 3) int64 lattice coordinates
    geom_feat: np.ndarray  # (N, F)
    sem_feat: np.ndarray  # (N, F)
    offsets: np.ndarray  # (N, K, 3)
    log_scaling: np.ndarray  # (N,)
    _cell_set: set = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise InvalidInputError("voxel_size must be positive")
        if self.K < 1:
            raise InvalidInputError("K must be at least 1")
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self._cell_set is None:
            self._cell_set = {tuple(c) for c in self.cells}
        if len(self._cell_set) != len(self.cells):
            raise InvalidInputError("voxel centers must be unique")

    @property
    def num_voxels(self) -> int:
        return len(self.cells)

    @property
    def centers(self) -> np.ndarray:
        return self.cells.astype(np.float64) * self.voxel_size

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)

    def gaussian_positions(self) -> np.ndarray:
        """(N*K, 3) positions p = v + l * delta, slot-major within each voxel."""
        p = self.centers[:, None, :] + self.scaling[:, None, None] * self.offsets
        return p.reshape(-1, 3)


def points_to_cells(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def init_from_points(
    points: np.ndarray,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    K: int = DEFAULT_K,
    seed: int = 0,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    feature_scale: float = 1e-2,
) -> SparseVoxelGrid:
    """One voxel per occupied lattice cell, small-random features from seed."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise InvalidInputError("cannot build a grid from an empty point set")
    cells = np.unique(points_to_cells(points, voxel_size), axis=0)
    n = len(cells)
    rng = np.random.default_rng(seed)
    return SparseVoxelGrid(
        voxel_size=voxel_size,
        K=K,
        feature_dim=feature_dim,
        cells=cells,
        geom_feat=feature_scale * rng.standard_normal((n, feature_dim)),
        sem_feat=feature_scale * rng.standard_normal((n, feature_dim)),
        offsets=rng.uniform(-0.5, 0.5, size=(n, K, 3)),
        log_scaling=np.full(n, np.log(voxel_size)),
    )


@dataclass
class DensifyResult:
    added: int
    removed: int
    keep_index: np.ndarray  # indices of surviving pre-update voxels
    parent_index: np.ndarray  # for each added voxel, its source voxel index


def densify_and_prune(
    grid: SparseVoxelGrid,
    grad_stats: np.ndarray,  # (N,) mean screen-space positional gradient magnitude
    opacities: np.ndarray,  # (N, K)
    step: int,
    rng: np.random.Generator,
    grow_threshold: float = 2e-4,
    prune_threshold: float = 0.005,
    window: tuple[int, int] = (1500, 20000),
    feature_noise: float = 1e-2,
    slot_scores: np.ndarray = None,  # (N, K) per-Gaussian gradient magnitudes
) -> DensifyResult:
    """Grow voxels where screen-space gradients are large, prune transparent ones.

    Growth spawns a voxel at the lattice cell of the parent's highest-gradient
    Gaussian if that cell is unoccupied.  Features are copied plus noise;
    offsets are chosen so the spawned Gaussians start at exactly the parent
    Gaussians' world positions (clone-style growth) — randomized offsets
    would materialize off-surface floaters that the decaying offset learning
    rate can never pull back.  A voxel is pruned when all K opacities fall
    below the prune threshold.  No-op outside the schedule window.
    """
    n = grid.num_voxels
    if step < window[0] or step > window[1]:
        return DensifyResult(0, 0, np.arange(n), np.empty(0, dtype=np.int64))

    keep = ~np.all(opacities < prune_threshold, axis=1)
    growers = np.flatnonzero((grad_stats > grow_threshold) & keep)

    positions = grid.gaussian_positions().reshape(n, grid.K, 3)
    occupied = set(grid._cell_set)
    new_cells, parents = [], []
    for vi in growers:
        # new voxel at the lattice cell of the highest-gradient Gaussian;
        # without per-slot scores fall back to the farthest-reaching slot
        if slot_scores is not None:
            slot = int(np.argmax(slot_scores[vi]))
        else:
            slot = int(np.argmax(np.linalg.norm(grid.offsets[vi], axis=-1)))
        cell = tuple(points_to_cells(positions[vi, slot], grid.voxel_size))
        if cell not in occupied:
            occupied.add(cell)
            new_cells.append(cell)
            parents.append(vi)

    keep_index = np.flatnonzero(keep)
    parent_index = np.asarray(parents, dtype=np.int64)

    cells = grid.cells[keep_index]
    geom = grid.geom_feat[keep_index]
    sem = grid.sem_feat[keep_index]
    offs = grid.offsets[keep_index]
    logl = grid.log_scaling[keep_index]

    if new_cells:
        cells = np.vstack([cells, np.asarray(new_cells, dtype=np.int64)])
        geom = np.vstack(
            [geom, grid.geom_feat[parent_index]
             + feature_noise * rng.standard_normal((len(parents), grid.feature_dim))]
        )
        sem = np.vstack(
            [sem, grid.sem_feat[parent_index]
             + feature_noise * rng.standard_normal((len(parents), grid.feature_dim))]
        )
        new_centers = (
            np.asarray(new_cells, dtype=np.float64) * grid.voxel_size
        )
        l_parent = np.exp(grid.log_scaling[parent_index])
        new_offs = (
            positions[parent_index] - new_centers[:, None, :]
        ) / l_parent[:, None, None]
        offs = np.vstack([offs, new_offs])
        logl = np.concatenate([logl, grid.log_scaling[parent_index]])

    grid.cells = cells
    grid.geom_feat = geom
    grid.sem_feat = sem
    grid.offsets = offs
    grid.log_scaling = logl
    grid._cell_set = {tuple(c) for c in cells}
    if len(grid._cell_set) != len(cells):
        raise AssertionError("lattice uniqueness violated after densify")
    return DensifyResult(len(new_cells), int(n - keep.sum()), keep_index, parent_index)
