import os

import numpy as np
import pytest

from structsplat.dataset_io import (
    ParseError,
    read_dataset,
    read_ply,
    write_dataset,
    write_ply,
)
from structsplat.synthetic import SceneSpec, generate


def tiny_dataset():
    return generate(SceneSpec(width=32, height=24, n_cameras=4, n_points=40,
                              seed=5))


def read_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestRoundTrip:
    def test_write_read_write_byte_identical(self, tmp_path):
        ds = tiny_dataset()
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        write_dataset(ds, str(d1))
        ds2 = read_dataset(str(d1))
        write_dataset(ds2, str(d2))
        t1, t2 = read_tree(str(d1)), read_tree(str(d2))
        assert set(t1) == set(t2)
        for k in t1:
            assert t1[k] == t2[k], f"file differs after round trip: {k}"

    def test_read_back_matches(self, tmp_path):
        ds = tiny_dataset()
        write_dataset(ds, str(tmp_path / "d"))
        ds2 = read_dataset(str(tmp_path / "d"))
        assert np.array_equal(ds.images, ds2.images)
        assert np.array_equal(ds.sems, ds2.sems)
        assert np.allclose(ds.depths, ds2.depths, atol=0)
        assert np.array_equal(ds.points, ds2.points)
        assert np.array_equal(ds.point_labels, ds2.point_labels)
        assert ds.point_obs == ds2.point_obs
        assert ds.mode == ds2.mode
        assert np.array_equal(ds.planes_gt.n_g, ds2.planes_gt.n_g)
        assert ds.planes_gt.d_f == ds2.planes_gt.d_f
        for c1, c2 in zip(ds.cameras, ds2.cameras):
            assert np.array_equal(c1.rotation, c2.rotation)
            assert np.array_equal(c1.translation, c2.translation)
            assert (c1.fx, c1.fy, c1.cx, c1.cy) == (c2.fx, c2.fy, c2.cx, c2.cy)

    def test_missing_semantic_map(self, tmp_path):
        ds = tiny_dataset()
        write_dataset(ds, str(tmp_path / "d"))
        os.remove(tmp_path / "d" / "sem" / "2.png")
        with pytest.raises(ParseError, match="view 2"):
            read_dataset(str(tmp_path / "d"))

    def test_missing_cameras(self, tmp_path):
        with pytest.raises(ParseError, match="cameras.txt"):
            read_dataset(str(tmp_path))


class TestPly:
    def test_external_labeled_points_fixture(self, tmp_path):
        # hand-built 5-point ascii PLY following the documented layout
        text = (
            "ply\nformat ascii 1.0\nelement vertex 5\n"
            "property double x\nproperty double y\nproperty double z\n"
            "property uchar label\nend_header\n"
            "0 0 0 0\n1 0 0 1\n0 1 0 2\n0 0 1 3\n0.5 0.5 0.25 2\n"
        )
        p = tmp_path / "pts.ply"
        p.write_text(text)
        verts, faces, labels = read_ply(str(p))
        assert verts.shape == (5, 3)
        assert faces is None
        assert np.array_equal(labels, [0, 1, 2, 3, 2])
        assert np.allclose(verts[4], [0.5, 0.5, 0.25])

    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.uniform(size=(7, 3))
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        labels = rng.integers(0, 4, size=7)
        p = str(tmp_path / "m.ply")
        write_ply(p, verts, faces=faces, labels=labels, binary=True)
        v2, f2, l2 = read_ply(p)
        assert np.array_equal(verts, v2)
        assert np.array_equal(faces, f2)
        assert np.array_equal(labels, l2)

    def test_ascii_mesh_round_trip(self, tmp_path):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        p = str(tmp_path / "m.ply")
        write_ply(p, verts, faces=np.array([[0, 1, 2]]))
        v2, f2, l2 = read_ply(p)
        assert np.array_equal(verts, v2)
        assert np.array_equal(f2, [[0, 1, 2]])
        assert l2 is None

    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("hello\nworld\n")
        with pytest.raises(ParseError):
            read_ply(str(p))
