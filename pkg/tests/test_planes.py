import itertools

import numpy as np
import pytest

from structsplat.decoders import SurfelBatch
from structsplat.geometry import (
    CLS_CEILING,
    CLS_FLOOR,
    CLS_OTHER,
    CLS_WALL,
    Camera,
    InvalidInputError,
)
from structsplat.planes import (
    PlaneFitError,
    PlaneIndicators,
    ceiling_offset,
    fit_floor_ransac,
    init_plane_indicators,
    loss_2d_local,
    loss_3d_global,
    maybe_reinit,
    vote_point_labels,
)


def make_cam(width=10, height=8, fx=12.0, fy=12.0):
    return Camera(
        width=width, height=height, fx=fx, fy=fy,
        cx=width / 2, cy=height / 2,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def make_batch(positions, normals, sem):
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    sem = np.atleast_2d(np.asarray(sem, dtype=float))
    m = len(positions)
    frame = np.zeros((m, 3, 3))
    frame[:, :, 2] = normals
    quat = np.tile([1.0, 0, 0, 0], (m, 1))
    return SurfelBatch(
        position=positions,
        opacity=np.full(m, 0.5),
        scale=np.full((m, 2), 0.1),
        quat=quat,
        frame=frame,
        color=np.full((m, 3), 0.5),
        sem=sem,
        voxel_index=np.arange(m),
        slot=np.zeros(m, dtype=int),
    )


ONE_HOT = np.eye(4)


class TestIndicators:
    def test_non_unit_gravity_rejected(self):
        with pytest.raises(InvalidInputError):
            PlaneIndicators(np.array([0.0, 0, 2.0]), d_f=-1.0, d_c=2.5)

    def test_coincident_planes_rejected(self):
        with pytest.raises(InvalidInputError):
            PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0, d_c=1.0)

    def test_no_ceiling_skips_distinctness(self):
        PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0, d_c=1.0,
                        has_ceiling=False)


class TestVoting:
    def _single_pixel_maps(self, labels):
        # each view is a 1x1 label image; the point projects to (0, 0)
        maps = {v: np.full((1, 1), lab, dtype=int) for v, lab in enumerate(labels)}
        obs = [[(v, 0.0, 0.0) for v in range(len(labels))]]
        return maps, obs

    def test_majority(self):
        maps, obs = self._single_pixel_maps([CLS_WALL, CLS_WALL, CLS_FLOOR])
        out = vote_point_labels(np.zeros((1, 3)), obs, maps)
        assert out.labels[0] == CLS_WALL
        assert np.isclose(out.confidence[0], 2 / 3)

    def test_single_observation(self):
        maps, obs = self._single_pixel_maps([CLS_FLOOR])
        out = vote_point_labels(np.zeros((1, 3)), obs, maps)
        assert out.labels[0] == CLS_FLOOR
        assert out.confidence[0] == 1.0

    def test_tie_priority_exhaustive_pairs(self):
        priority = [CLS_FLOOR, CLS_CEILING, CLS_WALL, CLS_OTHER]
        for a, b in itertools.combinations(range(4), 2):
            maps, obs = self._single_pixel_maps([a, b])
            out = vote_point_labels(np.zeros((1, 3)), obs, maps)
            expected = a if priority.index(a) < priority.index(b) else b
            assert out.labels[0] == expected, (a, b)
            assert np.isclose(out.confidence[0], 0.5)

    def test_no_valid_observation(self):
        maps = {0: np.full((1, 1), CLS_WALL, dtype=int)}
        obs = [[(0, 50.0, 50.0)]]  # off the image
        out = vote_point_labels(np.zeros((1, 3)), obs, maps)
        assert out.labels[0] == CLS_OTHER
        assert out.confidence[0] == 0.0


def plane_points(n, z, seed, span=1.0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, span, size=(n, 2))
    return np.column_stack([xy, np.full(n, z)])


class TestRansac:
    def test_noiseless_exact(self):
        floor = plane_points(100, 1.0, seed=0)
        above = plane_points(50, 2.0, seed=1)
        n_g, d_f = fit_floor_ransac(floor, above, seed=3)
        assert np.linalg.norm(np.cross(n_g, [0, 0, 1])) < 1e-6
        assert n_g[2] > 0  # oriented toward the interior
        assert abs(d_f - (-1.0)) < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        pts = np.vstack([plane_points(70, 1.0, seed=4),
                         rng.uniform(0, 1, size=(30, 3))])
        r1 = fit_floor_ransac(pts, plane_points(20, 2.0, seed=5), seed=9)
        r2 = fit_floor_ransac(pts, plane_points(20, 2.0, seed=5), seed=9)
        assert np.array_equal(r1[0], r2[0]) and r1[1] == r2[1]

    def test_outliers_vs_exhaustive_oracle(self):
        rng = np.random.default_rng(21)
        inliers = plane_points(70, 1.0, seed=22)
        outliers = rng.uniform(0, 1, size=(30, 3))
        pts = np.vstack([inliers, outliers])
        perm = rng.permutation(len(pts))
        pts = pts[perm]
        n_g, d_f = fit_floor_ransac(pts, plane_points(20, 2.0, seed=5),
                                    inlier_tol=0.02, seed=30)
        assert np.degrees(np.arccos(min(1.0, abs(n_g[2])))) < 0.5

        # oracle: exhaustive 3-point hypothesis search on a 30-point subsample
        sub = pts[np.random.default_rng(40).choice(len(pts), 30, replace=False)]
        best_n, best_count = None, -1
        for i, j, k in itertools.combinations(range(30), 3):
            n = np.cross(sub[j] - sub[i], sub[k] - sub[i])
            nn = np.linalg.norm(n)
            if nn < 1e-12:
                continue
            n = n / nn
            count = int((np.abs((pts - sub[i]) @ n) <= 0.02).sum())
            if count > best_count:
                best_count, best_n = count, n
        angle = np.degrees(np.arccos(min(1.0, abs(best_n @ n_g))))
        assert angle < 0.5

    def test_collinear_error(self):
        pts = np.outer(np.arange(3.0), [1.0, 2.0, 3.0])
        with pytest.raises(PlaneFitError):
            fit_floor_ransac(pts)

    def test_too_few_points(self):
        with pytest.raises(PlaneFitError):
            fit_floor_ransac(np.zeros((2, 3)))


class TestCeilingAndInit:
    def test_mean_projection(self):
        n_g = np.array([0.0, 0, 1.0])
        pts = np.array([[0, 0, 2.4], [1, 0, 2.5], [0, 1, 2.6]])
        assert np.isclose(ceiling_offset(pts, n_g), 2.5)

    def test_single_point(self):
        assert ceiling_offset(np.array([[0, 0, 3.0]]), [0, 0, 1.0]) == 3.0

    def test_empty_disables_ceiling(self):
        assert ceiling_offset(np.zeros((0, 3)), [0, 0, 1.0]) is None

    def test_init_from_cloud_urban(self):
        from structsplat.planes import LabeledPointCloud

        floor = plane_points(50, 0.0, seed=1)
        walls = plane_points(20, 1.5, seed=2)
        cloud = LabeledPointCloud(
            np.vstack([floor, walls]),
            np.concatenate([np.full(50, CLS_FLOOR), np.full(20, CLS_WALL)]),
            np.ones(70),
        )
        ind = init_plane_indicators(cloud, seed=0)
        assert not ind.has_ceiling
        assert abs(ind.n_g[2]) > 1 - 1e-9
        assert abs(ind.d_f) < 1e-9


class TestReinit:
    CUR = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0, d_c=2.5)

    def test_zero_deviation_unchanged(self):
        out = maybe_reinit(self.CUR, self.CUR.copy())
        assert out is self.CUR

    def test_angle_over_threshold_replaced(self):
        a = np.radians(15)
        fresh = PlaneIndicators(
            np.array([np.sin(a), 0, np.cos(a)]), d_f=-1.0, d_c=2.5)
        out = maybe_reinit(self.CUR, fresh, angle_thresh_deg=10.0)
        assert np.array_equal(out.n_g, fresh.n_g)

    def test_within_thresholds_unchanged(self):
        a = np.radians(5)
        fresh = PlaneIndicators(
            np.array([np.sin(a), 0, np.cos(a)]), d_f=-1.05, d_c=2.55)
        assert maybe_reinit(self.CUR, fresh) is self.CUR

    def test_offset_over_threshold_replaced(self):
        fresh = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.2, d_c=2.5)
        out = maybe_reinit(self.CUR, fresh)
        assert out.d_f == -1.2

    def test_idempotent(self):
        fresh = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.2, d_c=2.5)
        once = maybe_reinit(self.CUR, fresh)
        twice = maybe_reinit(once, fresh)
        assert np.array_equal(once.n_g, twice.n_g)
        assert once.d_f == twice.d_f and once.d_c == twice.d_c


PLANES = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0, d_c=2.5)


class TestLoss3D:
    def test_perfect_floor_zero(self):
        b = make_batch([[0.3, 0.2, 1.0]], [[0, 0, 1.0]], ONE_HOT[CLS_FLOOR])
        loss, *_ = loss_3d_global(b, PLANES)
        assert loss == 0.0

    def test_wall_parallel_to_gravity(self):
        b = make_batch([[0, 0, 1.5]], [[0, 0, 1.0]], ONE_HOT[CLS_WALL])
        loss, _, _, terms = loss_3d_global(b, PLANES)
        assert np.isclose(terms["perp"], 1.0)
        assert np.isclose(loss, 1.0)

    def test_lifted_floor_gaussian(self):
        b = make_batch([[0.5, 0.5, 1.1]], [[0, 0, 1.0]], ONE_HOT[CLS_FLOOR])
        loss, _, _, terms = loss_3d_global(b, PLANES)
        assert np.isclose(terms["floor"], 0.1)
        assert np.isclose(loss, 0.1)

    def test_aligned_scene_exactly_zero(self):
        pos = [[0, 0, 1.0], [0, 1, 2.5], [0.5, 0, 1.7], [2, 2, 0.4]]
        nrm = [[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0], [0, 1.0, 0]]
        sem = ONE_HOT[[CLS_FLOOR, CLS_CEILING, CLS_WALL, CLS_OTHER]]
        loss, sg, pg, _ = loss_3d_global(make_batch(pos, nrm, sem), PLANES)
        assert loss == 0.0

    def test_nonnegative_random(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            m = 20
            b = make_batch(
                rng.normal(size=(m, 3)),
                rng.normal(size=(m, 3)),
                rng.dirichlet(np.ones(4), size=m),
            )
            loss, *_ = loss_3d_global(b, PLANES)
            assert loss >= 0.0

    def test_no_ceiling_excludes_terms(self):
        planes = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0,
                                 has_ceiling=False)
        b = make_batch([[0, 0, 9.0]], [[1.0, 0, 0]], ONE_HOT[CLS_CEILING])
        loss, _, _, terms = loss_3d_global(b, planes)
        assert terms["ceiling"] == 0.0
        assert terms["parallel"] == 0.0  # ceiling members dropped from M_par
        assert loss == 0.0

    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        m = 16
        b = make_batch(
            rng.normal(size=(m, 3)),
            rng.normal(size=(m, 3)),
            rng.dirichlet(np.ones(4), size=m),
        )
        raw = np.array([0.3, -0.2, 1.1])
        ng = raw / np.linalg.norm(raw)
        planes = PlaneIndicators(ng, d_f=-0.7, d_c=1.9)
        # stay away from the |.| kinks
        normals = b.frame[:, :, 2]
        assert np.all(np.abs(normals @ ng) > 1e-3)
        assert np.all(np.abs(planes.d_f + b.position @ ng) > 1e-3)
        assert np.all(np.abs(planes.d_c - b.position @ ng) > 1e-3)

        loss0, sg, pg, _ = loss_3d_global(b, planes, n_g_raw=raw)
        h = 1e-6

        def fd(setter):
            def at(delta):
                return setter(delta)
            return (at(+h) - at(-h)) / (2 * h)

        def check(fd_val, ana, label):
            assert abs(fd_val - ana) <= 1e-4 * max(abs(fd_val), abs(ana), 1e-7), (
                f"{label}: fd={fd_val} analytic={ana}")

        for i in rng.choice(m, 6, replace=False):
            for ax in range(3):
                def eval_pos(delta, i=i, ax=ax):
                    b.position[i, ax] += delta
                    val = loss_3d_global(b, planes, n_g_raw=raw)[0]
                    b.position[i, ax] -= delta
                    return val
                check(fd(eval_pos), sg.position[i, ax], f"pos[{i},{ax}]")

                def eval_nrm(delta, i=i, ax=ax):
                    b.frame[i, ax, 2] += delta
                    val = loss_3d_global(b, planes, n_g_raw=raw)[0]
                    b.frame[i, ax, 2] -= delta
                    return val
                check(fd(eval_nrm), sg.frame[i, ax, 2], f"nrm[{i},{ax}]")

        for ax in range(3):
            def eval_ng(delta, ax=ax):
                r = raw.copy()
                r[ax] += delta
                return loss_3d_global(b, planes, n_g_raw=r)[0]
            check(fd(eval_ng), pg.n_g_raw[ax], f"n_g_raw[{ax}]")

        def eval_df(delta):
            p2 = PlaneIndicators(ng, d_f=planes.d_f + delta, d_c=planes.d_c)
            return loss_3d_global(b, p2, n_g_raw=raw)[0]
        check(fd(eval_df), pg.d_f, "d_f")

        def eval_dc(delta):
            p2 = PlaneIndicators(ng, d_f=planes.d_f, d_c=planes.d_c + delta)
            return loss_3d_global(b, p2, n_g_raw=raw)[0]
        check(fd(eval_dc), pg.d_c, "d_c")

        # analytic gravity gradient is tangent to the sphere at n_g
        assert abs(pg.n_g_raw @ ng) < 1e-12 * max(1.0, np.abs(pg.n_g_raw).max())


class TestLoss2D:
    def _buffers(self, cam, depth_value=2.0):
        h, w = cam.height, cam.width
        depth = np.full((h, w), depth_value)
        acc = np.ones((h, w))
        return depth, acc

    def _sem_onehot(self, cam, cls):
        sem = np.zeros((cam.height, cam.width, 4))
        sem[..., cls] = 1.0
        return sem

    def test_wall_pixels_zero(self):
        cam = make_cam()
        depth, acc = self._buffers(cam)
        # flat frontal surface: N_d = (0,0,-1), gravity along x -> perpendicular
        planes = PlaneIndicators(np.array([1.0, 0, 0]), d_f=-1.0, d_c=2.5)
        loss, grad = loss_2d_local(depth, acc, self._sem_onehot(cam, CLS_WALL),
                                   cam, planes)
        assert abs(loss) < 1e-12
        assert grad.shape == depth.shape

    def test_floor_pixels_zero(self):
        cam = make_cam()
        depth, acc = self._buffers(cam)
        planes = PlaneIndicators(np.array([0.0, 0, 1.0]), d_f=-1.0, d_c=2.5)
        loss, _ = loss_2d_local(depth, acc, self._sem_onehot(cam, CLS_FLOOR),
                                cam, planes)
        assert abs(loss) < 1e-12

    def test_45_degree_mixed(self):
        cam = make_cam()
        depth, acc = self._buffers(cam)
        sem = np.zeros((cam.height, cam.width, 4))
        sem[..., CLS_WALL] = 0.5
        sem[..., CLS_FLOOR] = 0.5
        ng = np.array([1.0, 0, -1.0]) / np.sqrt(2)  # 45 deg to N_d = (0,0,-1)
        planes = PlaneIndicators(ng, d_f=-1.0, d_c=2.5)
        loss, _ = loss_2d_local(depth, acc, sem, cam, planes)
        assert abs(loss - 0.5) < 1e-12

    def test_low_acc_excluded(self):
        cam = make_cam()
        depth, acc = self._buffers(cam)
        acc[...] = 0.1
        loss, grad = loss_2d_local(depth, acc, self._sem_onehot(cam, CLS_WALL),
                                   cam, PLANES)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_finite_differences(self):
        cam = make_cam(width=7, height=6)
        rng = np.random.default_rng(17)
        depth = 2.0 + 0.2 * rng.standard_normal((cam.height, cam.width))
        acc = np.ones_like(depth)
        p_w = rng.uniform(0.1, 0.9, size=depth.shape)
        p_cf = 1.0 - p_w
        mask = acc >= 0.5
        frozen = (p_w, p_cf, mask)
        raw = np.array([0.4, 0.3, 0.85])
        planes = PlaneIndicators(raw / np.linalg.norm(raw), d_f=-1.0, d_c=2.5)

        loss0, grad = loss_2d_local(depth, acc, None, cam, planes,
                                    frozen_weights=frozen)
        h = 1e-6
        idx = rng.choice(depth.size, 25, replace=False)
        flat = depth.ravel()
        ga = grad.ravel()
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_2d_local(depth, acc, None, cam, planes,
                               frozen_weights=frozen)[0]
            flat[i] = orig - h
            lm = loss_2d_local(depth, acc, None, cam, planes,
                               frozen_weights=frozen)[0]
            flat[i] = orig
            fdv = (lp - lm) / (2 * h)
            assert abs(fdv - ga[i]) <= 1e-4 * max(abs(fdv), abs(ga[i]), 1e-7), (
                f"depth[{i}]: fd={fdv} analytic={ga[i]}")
