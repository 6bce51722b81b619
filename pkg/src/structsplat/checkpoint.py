"""Binary checkpoint format for the trained model.

Contents: sparse voxel grid, decoder MLP parameters, plane indicators, and
the scene normalization applied during training.  save -> load -> save is
byte-identical (full-precision little-endian binary, deterministic key
order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grid import SparseVoxelGrid
from .planes import PlaneIndicators

MAGIC = b"SSPL"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    grid: SparseVoxelGrid
    decoder_params: dict
    planes: PlaneIndicators
    norm_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_scale: float = 1.0
    hidden: int = 64
    mode: str = "indoor"
    step: int = 0

    def copy(self) -> "TrainState":
        g = self.grid
        grid = SparseVoxelGrid(
            voxel_size=g.voxel_size, K=g.K, feature_dim=g.feature_dim,
            cells=g.cells.copy(), geom_feat=g.geom_feat.copy(),
            sem_feat=g.sem_feat.copy(), offsets=g.offsets.copy(),
            log_scaling=g.log_scaling.copy(),
        )
        return TrainState(
            grid=grid,
            decoder_params={k: v.copy() for k, v in self.decoder_params.items()},
            planes=self.planes.copy(),
            norm_center=self.norm_center.copy(),
            norm_scale=self.norm_scale,
            hidden=self.hidden,
            mode=self.mode,
            step=self.step,
        )


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.tobytes())


def _read_array(fh):
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, state: TrainState):
    g = state.grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<dIIQ", g.voxel_size, g.K, g.feature_dim,
                             g.num_voxels))
        fh.write(np.ascontiguousarray(g.cells, dtype="<i8").tobytes())
        for arr in (g.geom_feat, g.sem_feat, g.offsets, g.log_scaling):
            _write_array(fh, arr)
        keys = sorted(state.decoder_params)
        fh.write(struct.pack("<I", len(keys)))
        for k in keys:
            kb = k.encode("ascii")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            _write_array(fh, state.decoder_params[k])
        p = state.planes
        fh.write(np.ascontiguousarray(p.n_g, dtype="<f8").tobytes())
        fh.write(struct.pack("<ddB", p.d_f, p.d_c, int(p.has_ceiling)))
        fh.write(np.ascontiguousarray(state.norm_center, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", state.norm_scale))
        fh.write(struct.pack("<II", state.hidden, state.step))
        mb = state.mode.encode("ascii")
        fh.write(struct.pack("<I", len(mb)))
        fh.write(mb)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        voxel_size, K, feature_dim, n = struct.unpack("<dIIQ", fh.read(24))
        cells = np.frombuffer(fh.read(24 * n), dtype="<i8").reshape(n, 3).copy()
        geom_feat = _read_array(fh)
        sem_feat = _read_array(fh)
        offsets = _read_array(fh)
        log_scaling = _read_array(fh)
        grid = SparseVoxelGrid(
            voxel_size=voxel_size, K=K, feature_dim=feature_dim, cells=cells,
            geom_feat=geom_feat, sem_feat=sem_feat, offsets=offsets,
            log_scaling=log_scaling,
        )
        (n_keys,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_keys):
            (klen,) = struct.unpack("<I", fh.read(4))
            k = fh.read(klen).decode("ascii")
            params[k] = _read_array(fh)
        n_g = np.frombuffer(fh.read(24), dtype="<f8").copy()
        d_f, d_c, has_c = struct.unpack("<ddB", fh.read(17))
        planes = PlaneIndicators(n_g, d_f=d_f, d_c=d_c, has_ceiling=bool(has_c))
        norm_center = np.frombuffer(fh.read(24), dtype="<f8").copy()
        (norm_scale,) = struct.unpack("<d", fh.read(8))
        hidden, step = struct.unpack("<II", fh.read(8))
        (mlen,) = struct.unpack("<I", fh.read(4))
        mode = fh.read(mlen).decode("ascii")
    return TrainState(
        grid=grid, decoder_params=params, planes=planes,
        norm_center=norm_center, norm_scale=norm_scale,
        hidden=hidden, mode=mode, step=step,
    )
