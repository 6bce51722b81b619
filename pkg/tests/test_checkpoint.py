import struct

import numpy as np
import pytest

from structsplat.checkpoint import (
    MAGIC,
    CheckpointError,
    TrainState,
    load_checkpoint,
    save_checkpoint,
)
from structsplat.decoders import init_decoder_params
from structsplat.grid import init_from_points
from structsplat.planes import PlaneIndicators


def make_state(seed=0, has_ceiling=True):
    rng = np.random.default_rng(seed)
    grid = init_from_points(rng.uniform(size=(40, 3)), 0.2, K=4, seed=seed,
                            feature_dim=8)
    params = init_decoder_params(8, 4, hidden=16, seed=seed + 1)
    n = np.array([0.1, 0.0, 1.0])
    planes = PlaneIndicators(n / np.linalg.norm(n), d_f=-0.1,
                             d_c=0.9 if has_ceiling else 0.0,
                             has_ceiling=has_ceiling)
    return TrainState(
        grid=grid, decoder_params=params, planes=planes,
        norm_center=np.array([0.5, -0.25, 1.0]), norm_scale=2.5,
        hidden=16, mode="indoor", step=123,
    )


def assert_states_equal(a: TrainState, b: TrainState):
    assert a.grid.voxel_size == b.grid.voxel_size
    assert a.grid.K == b.grid.K
    assert a.grid.feature_dim == b.grid.feature_dim
    assert np.array_equal(a.grid.cells, b.grid.cells)
    for f in ("geom_feat", "sem_feat", "offsets", "log_scaling"):
        assert np.array_equal(getattr(a.grid, f), getattr(b.grid, f)), f
    assert sorted(a.decoder_params) == sorted(b.decoder_params)
    for k in a.decoder_params:
        assert np.array_equal(a.decoder_params[k], b.decoder_params[k]), k
    assert np.array_equal(a.planes.n_g, b.planes.n_g)
    assert a.planes.d_f == b.planes.d_f
    assert a.planes.d_c == b.planes.d_c
    assert a.planes.has_ceiling == b.planes.has_ceiling
    assert np.array_equal(a.norm_center, b.norm_center)
    assert a.norm_scale == b.norm_scale
    assert a.hidden == b.hidden
    assert a.mode == b.mode
    assert a.step == b.step


class TestRoundTrip:
    def test_fields_survive(self, tmp_path):
        state = make_state()
        p = tmp_path / "ckpt.bin"
        save_checkpoint(p, state)
        assert_states_equal(state, load_checkpoint(p))

    def test_no_ceiling(self, tmp_path):
        state = make_state(seed=3, has_ceiling=False)
        p = tmp_path / "ckpt.bin"
        save_checkpoint(p, state)
        loaded = load_checkpoint(p)
        assert loaded.planes.has_ceiling is False
        assert_states_equal(state, loaded)

    def test_save_load_save_byte_identical(self, tmp_path):
        state = make_state(seed=1)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, state)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_urban_mode_string(self, tmp_path):
        state = make_state()
        state.mode = "urban"
        p = tmp_path / "c.bin"
        save_checkpoint(p, state)
        assert load_checkpoint(p).mode == "urban"


class TestErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v99.bin"
        p.write_bytes(MAGIC + struct.pack("<I", 99) + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestCopy:
    def test_deep_copy_is_independent(self):
        state = make_state()
        dup = state.copy()
        dup.grid.geom_feat += 1.0
        for k in dup.decoder_params:
            dup.decoder_params[k] += 1.0
        dup.norm_center += 5.0
        dup.step = 999
        fresh = make_state()
        assert_states_equal(state, fresh)
