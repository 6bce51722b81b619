import types

import numpy as np
import pytest

from structsplat.geometry import InvalidInputError
from structsplat.losses import (
    SSIM_C1,
    SSIM_C2,
    LossReport,
    LossWeights,
    _gaussian_window,
    align_scale_shift,
    loss_depth,
    loss_distortion,
    loss_normal,
    loss_normal_consistency,
    loss_rgb,
    loss_semantic,
    ssim_with_grad,
    total_loss,
)


def reference_ssim(x, y):
    """Naive per-window SSIM, explicit loops."""
    w = _gaussian_window()
    k = w.shape[0]
    vals = []
    for ch in range(x.shape[2]):
        for i in range(x.shape[0] - k + 1):
            for j in range(x.shape[1] - k + 1):
                px = x[i : i + k, j : j + k, ch]
                py = y[i : i + k, j : j + k, ch]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx**2
                vy = (w * py * py).sum() - my**2
                cxy = (w * px * py).sum() - mx * my
                vals.append(
                    ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2))
                    / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2))
                )
    return np.mean(vals)


class TestRgb:
    def test_identical_zero(self):
        img = np.random.default_rng(0).uniform(size=(12, 12, 3))
        loss, grad = loss_rgb(img, img.copy())
        assert abs(loss) < 1e-12

    def test_constant_offset_l1(self):
        a = np.full((12, 12, 3), 0.4)
        loss, _ = loss_rgb(a + 0.1, a, ssim_mix=0.0)
        assert abs(loss - 0.1) < 1e-12

    def test_ssim_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(16, 16, 3))
        y = rng.uniform(size=(16, 16, 3))
        s, _ = ssim_with_grad(x, y)
        assert abs(s - reference_ssim(x, y)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            loss_rgb(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.3, 0.7, size=(12, 12, 3))
        # offset bounded away from zero keeps probes clear of the L1 kink
        delta = rng.choice([-1.0, 1.0], size=x.shape) * rng.uniform(
            0.05, 0.2, size=x.shape
        )
        y = np.clip(x + delta, 0.0, 1.0)
        assert np.all(np.abs(x - y) > 1e-3)
        loss0, grad = loss_rgb(x, y)
        h = 1e-6
        flat = x.ravel()
        ga = grad.ravel()
        for i in rng.choice(flat.size, 20, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_rgb(x, y)[0]
            flat[i] = orig - h
            lm = loss_rgb(x, y)[0]
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - ga[i]) <= 1e-4 * max(abs(fd), abs(ga[i]), 1e-7)


class TestAlign:
    def test_double(self):
        rng = np.random.default_rng(3)
        d = rng.uniform(1, 5, size=(8, 8))
        out = align_scale_shift(d, 2 * d, np.ones_like(d, bool))
        assert abs(out.w - 2) < 1e-9 and abs(out.q) < 1e-9
        assert not out.degenerate

    def test_shift(self):
        rng = np.random.default_rng(4)
        d = rng.uniform(1, 5, size=(8, 8))
        out = align_scale_shift(d, d + 1, np.ones_like(d, bool))
        assert abs(out.w - 1) < 1e-9 and abs(out.q - 1) < 1e-9

    def test_degenerate_constant(self):
        d = np.full((4, 4), 2.0)
        p = np.linspace(0, 1, 16).reshape(4, 4)
        out = align_scale_shift(d, p, np.ones_like(d, bool))
        assert out.degenerate
        assert out.w == 0.0 and abs(out.q - p.mean()) < 1e-12

    def test_grid_search_oracle(self):
        rng = np.random.default_rng(5)
        d = rng.uniform(0, 3, size=(6, 6))
        p = rng.uniform(0, 3, size=(6, 6))
        mask = rng.uniform(size=d.shape) > 0.3
        out = align_scale_shift(d, p, mask)

        def residual(w, q):
            r = w * d[mask] + q - p[mask]
            return np.sum(r * r)

        best = residual(out.w, out.q)
        for w in np.linspace(out.w - 0.5, out.w + 0.5, 201):
            for q in np.linspace(out.q - 0.5, out.q + 0.5, 201):
                assert residual(w, q) >= best - 1e-9


class TestDepth:
    def test_perfect_affine_fit(self):
        rng = np.random.default_rng(6)
        d = rng.uniform(1, 4, size=(8, 8))
        loss, grad = loss_depth(d, 3 * d - 2, np.ones_like(d, bool))
        assert abs(loss) < 1e-18
        assert np.allclose(grad, 0, atol=1e-12)

    def test_forced_identity_alignment(self):
        from structsplat.losses import ScaleShift

        rng = np.random.default_rng(7)
        p = rng.uniform(1, 4, size=(8, 8))
        d = p + 0.1
        loss, _ = loss_depth(d, p, np.ones_like(d, bool), align=ScaleShift(1.0, 0.0))
        assert abs(loss - 0.01) < 1e-12

    def test_empty_mask(self):
        with pytest.warns(RuntimeWarning):
            loss, grad = loss_depth(
                np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), bool)
            )
        assert loss == 0.0 and np.all(grad == 0)

    def test_affine_invariance_of_alignment(self):
        rng = np.random.default_rng(8)
        d = rng.uniform(1, 4, size=(8, 8))
        p = rng.uniform(1, 4, size=(8, 8))
        mask = np.ones_like(d, bool)
        base = align_scale_shift(d, p, mask)
        a, b = 2.5, -0.7
        scaled = align_scale_shift(d, a * p + b, mask)
        assert abs(scaled.w - a * base.w) < 1e-9
        assert abs(scaled.q - (a * base.q + b)) < 1e-9
        l0 = loss_depth(d, p, mask, align=base)[0]
        l1 = loss_depth(d, a * p + b, mask, align=scaled)[0]
        assert abs(l1 - a * a * l0) < 1e-9

    def test_finite_differences(self):
        rng = np.random.default_rng(9)
        d = rng.uniform(1, 4, size=(6, 6))
        p = rng.uniform(1, 4, size=(6, 6))
        mask = rng.uniform(size=d.shape) > 0.2
        align = align_scale_shift(d, p, mask)
        loss0, grad = loss_depth(d, p, mask, align=align)
        h = 1e-6
        flat, ga = d.ravel(), grad.ravel()
        for i in rng.choice(flat.size, 15, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_depth(d, p, mask, align=align)[0]
            flat[i] = orig - h
            lm = loss_depth(d, p, mask, align=align)[0]
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - ga[i]) <= 1e-4 * max(abs(fd), abs(ga[i]), 1e-7)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


class TestNormal:
    def test_all_aligned_zero(self):
        n = np.tile(unit([0, 0, -1.0]), (5, 5, 1))
        mask = np.ones((5, 5), bool)
        loss, g1, g2 = loss_normal(n, n, n, mask)
        assert abs(loss) < 1e-12

    def test_perpendicular_rendered(self):
        prior = np.tile(unit([0, 0, 1.0]), (4, 4, 1))
        rend = np.tile(unit([1.0, 0, 0]), (4, 4, 1))
        loss, *_ = loss_normal(rend, prior, prior, np.ones((4, 4), bool))
        assert abs(loss - 1.0) < 1e-12

    def test_sixty_degrees_both(self):
        prior = np.tile(unit([0, 0, 1.0]), (4, 4, 1))
        tilted = np.tile(unit([np.sin(np.pi / 3), 0, np.cos(np.pi / 3)]), (4, 4, 1))
        loss, *_ = loss_normal(tilted, tilted, prior, np.ones((4, 4), bool))
        assert abs(loss - 1.0) < 1e-9

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        rend = rng.normal(size=(5, 5, 3))  # raw, not unit: normalized inside
        nd = rng.normal(size=(5, 5, 3))
        nd /= np.linalg.norm(nd, axis=-1, keepdims=True)
        prior = rng.normal(size=(5, 5, 3))
        prior /= np.linalg.norm(prior, axis=-1, keepdims=True)
        mask = rng.uniform(size=(5, 5)) > 0.2
        loss0, g_rend, g_nd = loss_normal(rend, nd, prior, mask)
        h = 1e-6
        for arr, ga in ((rend, g_rend), (nd, g_nd)):
            flat, gflat = arr.ravel(), ga.ravel()
            for i in rng.choice(flat.size, 15, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_normal(rend, nd, prior, mask)[0]
                flat[i] = orig - h
                lm = loss_normal(rend, nd, prior, mask)[0]
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(fd - gflat[i]) <= 1e-4 * max(abs(fd), abs(gflat[i]), 1e-7)


class TestSemantic:
    def test_one_hot_match_zero(self):
        labels = np.random.default_rng(11).integers(0, 4, size=(4, 4))
        sem = np.eye(4)[labels]
        loss, grad = loss_semantic(sem, np.ones((4, 4)), labels)
        assert abs(loss) < 1e-12

    def test_uniform_ln4(self):
        labels = np.zeros((4, 4), dtype=np.int64)
        sem = np.full((4, 4, 4), 0.25)
        loss, _ = loss_semantic(sem, np.ones((4, 4)), labels)
        assert abs(loss - np.log(4)) < 1e-9

    def test_low_acc_excluded(self):
        labels = np.zeros((2, 2), dtype=np.int64)
        sem = np.full((2, 2, 4), 0.25)
        acc = np.ones((2, 2))
        acc[0, 0] = 0.3
        l1, _ = loss_semantic(sem, acc, labels)
        sem2 = sem.copy()
        sem2[0, 0] = [0.9, 0.05, 0.03, 0.02]
        l2, g2 = loss_semantic(sem2, acc, labels)
        assert l1 == l2
        assert np.all(g2[0, 0] == 0.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(12)
        labels = rng.integers(0, 4, size=(5, 5))
        sem = rng.dirichlet(np.ones(4), size=(5, 5)) * 0.9
        acc = np.full((5, 5), 0.9)
        acc[rng.uniform(size=(5, 5)) < 0.2] = 0.2
        loss0, grad = loss_semantic(sem, acc, labels)
        h = 1e-7
        flat, ga = sem.ravel(), grad.ravel()
        for i in rng.choice(flat.size, 25, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_semantic(sem, acc, labels)[0]
            flat[i] = orig - h
            lm = loss_semantic(sem, acc, labels)[0]
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - ga[i]) <= 1e-4 * max(abs(fd), abs(ga[i]), 1e-7)


def make_records(omegas_per_px, zs_per_px, gids_per_px=None):
    omega = np.concatenate([np.asarray(o, float) for o in omegas_per_px])
    z = np.concatenate([np.asarray(d, float) for d in zs_per_px])
    px_start = np.concatenate([[0], np.cumsum([len(o) for o in omegas_per_px])])
    buf = types.SimpleNamespace(
        rec_omega=omega, rec_z=z, px_start=px_start.astype(np.int64)
    )
    if gids_per_px is not None:
        buf.rec_gid = np.concatenate(
            [np.asarray(g, np.int64) for g in gids_per_px]
        )
    return buf


class TestDistortion:
    def test_single_record_zero(self):
        buf = make_records([[0.7]], [[2.0]])
        loss, go, gz = loss_distortion(buf)
        assert loss == 0.0

    def test_two_record_oracle(self):
        buf = make_records([[0.5, 0.25]], [[1.0, 2.0]])
        loss, *_ = loss_distortion(buf)
        assert abs(loss - 0.25) < 1e-12

    def test_coincident_depths_zero(self):
        buf = make_records([[0.5, 0.25, 0.1]], [[2.0, 2.0, 2.0]])
        loss, _, gz = loss_distortion(buf)
        assert abs(loss) < 1e-15

    def test_bruteforce_and_fd(self):
        rng = np.random.default_rng(13)
        counts = [0, 3, 1, 5, 2]
        omegas = [np.sort(rng.uniform(0.05, 0.3, c))[::-1] for c in counts]
        zs = [np.sort(rng.uniform(1, 5, c)) for c in counts]
        buf = make_records(omegas, zs)
        loss, go, gz = loss_distortion(buf)

        brute = 0.0
        for o, z in zip(omegas, zs):
            for i in range(len(o)):
                for j in range(len(o)):
                    brute += o[i] * o[j] * abs(z[i] - z[j])
        brute /= len(counts)
        assert abs(loss - brute) < 1e-12

        h = 1e-6
        for arr, ga in ((buf.rec_omega, go), (buf.rec_z, gz)):
            for i in range(len(arr)):
                orig = arr[i]
                arr[i] = orig + h
                lp = loss_distortion(buf)[0]
                arr[i] = orig - h
                lm = loss_distortion(buf)[0]
                arr[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(fd - ga[i]) <= 1e-4 * max(abs(fd), abs(ga[i])) + 1e-9


class TestNormalConsistency:
    def test_aligned_zero(self):
        nd = np.tile(unit([0, 0, -1.0]), (1, 2, 1))
        normals = np.array([unit([0, 0, -1.0])])
        buf = make_records([[0.5], [0.8]], [[1.0], [1.0]], [[0], [0]])
        loss, *_ = loss_normal_consistency(buf, normals, nd, np.ones((1, 2), bool))
        assert abs(loss) < 1e-12

    def test_perpendicular_one(self):
        nd = np.tile(unit([0, 0, -1.0]), (1, 1, 1))
        normals = np.array([unit([1.0, 0, 0])])
        buf = make_records([[1.0]], [[1.0]], [[0]])
        loss, *_ = loss_normal_consistency(buf, normals, nd, np.ones((1, 1), bool))
        assert abs(loss - 1.0) < 1e-12

    def test_two_records_direct_sum(self):
        rng = np.random.default_rng(14)
        nd = rng.normal(size=(1, 1, 3))
        nd /= np.linalg.norm(nd)
        normals = rng.normal(size=(2, 3))
        buf = make_records([[0.4, 0.3]], [[1.0, 2.0]], [[0, 1]])
        loss, *_ = loss_normal_consistency(buf, normals, nd, np.ones((1, 1), bool))
        direct = 0.4 * (1 - normals[0] @ nd[0, 0]) + 0.3 * (1 - normals[1] @ nd[0, 0])
        assert abs(loss - direct) < 1e-9

    def test_finite_differences(self):
        rng = np.random.default_rng(15)
        h_px, w_px, m = 2, 3, 4
        nd = rng.normal(size=(h_px, w_px, 3))
        nd /= np.linalg.norm(nd, axis=-1, keepdims=True)
        nd_valid = rng.uniform(size=(h_px, w_px)) > 0.2
        normals = rng.normal(size=(m, 3))
        counts = [2, 0, 1, 3, 1, 2]
        buf = make_records(
            [rng.uniform(0.1, 0.4, c) for c in counts],
            [np.sort(rng.uniform(1, 3, c)) for c in counts],
            [rng.integers(0, m, c) for c in counts],
        )
        loss0, go, gn, gnd = loss_normal_consistency(buf, normals, nd, nd_valid)
        h = 1e-6
        for arr, ga in ((buf.rec_omega, go), (normals, gn), (nd, gnd)):
            flat, gflat = arr.ravel(), ga.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_normal_consistency(buf, normals, nd, nd_valid)[0]
                flat[i] = orig - h
                lm = loss_normal_consistency(buf, normals, nd, nd_valid)[0]
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(fd - gflat[i]) <= 1e-4 * max(abs(fd), abs(gflat[i]), 1e-7)


class TestTotal:
    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            LossWeights(depth=-0.1)

    def test_all_zero(self):
        r = total_loss(LossReport(), LossWeights())
        assert r.total == 0.0

    def test_distortion_weight(self):
        r = total_loss(LossReport(distortion=0.01), LossWeights())
        assert abs(r.total - 1.0) < 1e-12

    def test_depth_weight(self):
        r = total_loss(LossReport(depth=1.0), LossWeights())
        assert abs(r.total - 0.25) < 1e-12

    def test_total_consistency(self):
        rng = np.random.default_rng(16)
        w = LossWeights()
        r = LossReport(*rng.uniform(0, 1, 8))
        r = total_loss(r, w)
        manual = (
            r.rgb + w.depth * r.depth + w.normal * r.normal
            + w.reg * (r.reg3d + r.reg2d) + w.semantic * r.semantic
            + w.distortion * r.distortion
            + w.normal_consistency * r.normal_consistency
        )
        assert abs(r.total - manual) < 1e-9

    def test_log_line(self):
        line = LossReport(rgb=0.5, total=0.5).log_line(7)
        assert line.startswith("step=7 rgb=0.5")
        assert "total=0.5" in line
