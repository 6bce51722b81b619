"""Differentiable tile-based surfel rasterization.

Each surfel is a planar elliptical Gaussian; a pixel ray is intersected with
the surfel's tangent plane, the Gaussian weight is evaluated in plane
coordinates, and attributes (color, depth, normal, semantics) are
alpha-blended front to back.  Depth everywhere means camera-z depth of the
intersection point; per-pixel ordering is an exact sort by (depth, surfel id).

The forward pass records, per pixel, the ordered list of blended surfel ids;
the backward pass replays that walk and reverses the blend and intersection
math exactly.  Semantics are blended with the same weights but those weights
are treated as constants in backward (stop-gradient): semantic upstream
gradients reach only the per-surfel semantic probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .decoders import SurfelBatch, SurfelGrads
from .geometry import Camera


class RenderContractError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    tile_size: int = 16
    near: float = 1e-4
    alpha_cutoff: float = 1.0 / 255.0
    term_transmittance: float = 1e-4


def ray_splat_intersect(
    position: np.ndarray,
    frame: np.ndarray,
    scale: np.ndarray,
    origin: np.ndarray,
    direction: np.ndarray,
    opacity: float = 1.0,
    near: float = 1e-4,
    alpha_cutoff: float = 1.0 / 255.0,
):
    """Intersect one unit-norm ray with one surfel.

    Returns (t, (u, v), G) or None when the ray misses: t <= near, the ray is
    parallel to the plane, or opacity * G falls below the blending cutoff.
    """
    direction = np.asarray(direction, dtype=np.float64)
    assert abs(np.linalg.norm(direction) - 1.0) < 1e-9, "ray direction must be unit"
    n = frame[:, 2]
    denom = float(n @ direction)
    if abs(denom) < 1e-9:
        return None
    t = float(n @ (position - origin)) / denom
    if t <= near:
        return None
    delta = origin + t * direction - position
    u = float(delta @ frame[:, 0]) / scale[0]
    v = float(delta @ frame[:, 1]) / scale[1]
    G = float(np.exp(-0.5 * (u * u + v * v)))
    if opacity * G < alpha_cutoff:
        return None
    return t, (u, v), G


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    sem: np.ndarray  # (H, W, 4)
    acc_alpha: np.ndarray  # (H, W)
    rec_gid: np.ndarray  # (R,) blended surfel ids, per-pixel contiguous
    rec_z: np.ndarray  # (R,) intersection camera-z depth
    rec_alpha: np.ndarray  # (R,)
    rec_omega: np.ndarray  # (R,) blend weight alpha_i * prod(1 - alpha_j)
    rec_trans: np.ndarray  # (R,) transmittance before the record
    px_start: np.ndarray  # (H*W + 1,)
    _batch_token: int = field(default=0, repr=False)


@njit(cache=True)
def _forward_kernel(
    origin, dirs, cfac, pix_tile, tile_start, tile_items,
    pu, pv, bxmin, bxmax, bymin, bymax,
    pos, fr, sc, op, col, sem, sigma,
    near, cutoff, term_t,
    out_color, out_depth, out_normal, out_sem, out_acc,
    rec_gid, rec_z, rec_alpha, rec_omega, rec_trans, px_count,
):
    npix = dirs.shape[0]
    maxc = 0
    for ti in range(tile_start.shape[0] - 1):
        c = tile_start[ti + 1] - tile_start[ti]
        if c > maxc:
            maxc = c
    cand_z = np.empty(maxc)
    cand_a = np.empty(maxc)
    cand_g = np.empty(maxc, dtype=np.int64)
    cursor = 0
    for pix in range(npix):
        tile = pix_tile[pix]
        dx, dy, dz = dirs[pix, 0], dirs[pix, 1], dirs[pix, 2]
        nc = 0
        u_, v_ = pu[pix], pv[pix]
        for it in range(tile_start[tile], tile_start[tile + 1]):
            # any blend above the cutoff projects inside the support bbox;
            # bbox arrays are per tile entry for contiguous reads
            if (
                u_ < bxmin[it] or u_ > bxmax[it]
                or v_ < bymin[it] or v_ > bymax[it]
            ):
                continue
            g = tile_items[it]
            nx, ny, nz = fr[g, 0, 2], fr[g, 1, 2], fr[g, 2, 2]
            denom = nx * dx + ny * dy + nz * dz
            if abs(denom) < 1e-9:
                continue
            wx = pos[g, 0] - origin[0]
            wy = pos[g, 1] - origin[1]
            wz = pos[g, 2] - origin[2]
            traw = (nx * wx + ny * wy + nz * wz) / denom
            z = traw * cfac[pix]
            if z <= near:
                continue
            ex = origin[0] + traw * dx - pos[g, 0]
            ey = origin[1] + traw * dy - pos[g, 1]
            ez = origin[2] + traw * dz - pos[g, 2]
            u = (ex * fr[g, 0, 0] + ey * fr[g, 1, 0] + ez * fr[g, 2, 0]) / sc[g, 0]
            v = (ex * fr[g, 0, 1] + ey * fr[g, 1, 1] + ez * fr[g, 2, 1]) / sc[g, 1]
            G = np.exp(-0.5 * (u * u + v * v))
            alpha = op[g] * G
            if alpha < cutoff:
                continue
            cand_z[nc] = z
            cand_a[nc] = alpha
            cand_g[nc] = g
            nc += 1
        # blend in (z, gid) order: argsort by depth, then restore the
        # deterministic gid tie-break within equal-depth runs
        order = np.argsort(cand_z[:nc])
        i = 0
        while i < nc - 1:
            if cand_z[order[i]] == cand_z[order[i + 1]]:
                j = i + 1
                while j < nc and cand_z[order[j]] == cand_z[order[i]]:
                    j += 1
                for a in range(i + 1, j):
                    key = order[a]
                    b = a - 1
                    while b >= i and cand_g[order[b]] > cand_g[key]:
                        order[b + 1] = order[b]
                        b -= 1
                    order[b + 1] = key
                i = j
            else:
                i += 1
        T = 1.0
        start = cursor
        for oi in range(nc):
            if T < term_t:
                break
            best = order[oi]
            g = cand_g[best]
            bz = cand_z[best]
            alpha = cand_a[best]
            omega = alpha * T
            out_color[pix, 0] += omega * col[g, 0]
            out_color[pix, 1] += omega * col[g, 1]
            out_color[pix, 2] += omega * col[g, 2]
            out_depth[pix] += omega * bz
            sg = sigma[g]
            out_normal[pix, 0] += omega * sg * fr[g, 0, 2]
            out_normal[pix, 1] += omega * sg * fr[g, 1, 2]
            out_normal[pix, 2] += omega * sg * fr[g, 2, 2]
            for c in range(4):
                out_sem[pix, c] += omega * sem[g, c]
            out_acc[pix] += omega
            rec_gid[cursor] = g
            rec_z[cursor] = bz
            rec_alpha[cursor] = alpha
            rec_omega[cursor] = omega
            rec_trans[cursor] = T
            cursor += 1
            T *= 1.0 - alpha
        px_count[pix] = cursor - start
    return cursor


@njit(cache=True)
def _backward_kernel(
    origin, dirs, cfac,
    pos, fr, sc, op, col, sem, sigma,
    rec_gid, rec_z, rec_alpha, rec_omega, rec_trans, px_start,
    g_color, g_depth, g_normal, g_sem, g_acc, g_rec_omega, g_rec_z,
    d_pos, d_op, d_sc, d_frame, d_col, d_sem,
):
    npix = dirs.shape[0]
    for pix in range(npix):
        r0, r1 = px_start[pix], px_start[pix + 1]
        if r1 == r0:
            continue
        dx, dy, dz = dirs[pix, 0], dirs[pix, 1], dirs[pix, 2]
        gcx, gcy, gcz = g_color[pix, 0], g_color[pix, 1], g_color[pix, 2]
        gzp = g_depth[pix]
        gnx, gny, gnz = g_normal[pix, 0], g_normal[pix, 1], g_normal[pix, 2]
        ga = g_acc[pix]
        S = 0.0  # suffix sum of gomega_j * omega_j
        for k in range(r1 - 1, r0 - 1, -1):
            g = rec_gid[k]
            T = rec_trans[k]
            alpha = rec_alpha[k]
            omega = rec_omega[k]
            z = rec_z[k]
            sg = sigma[g]
            nx, ny, nz = fr[g, 0, 2], fr[g, 1, 2], fr[g, 2, 2]
            # geometry-coupled blend weight gradient (sem excluded: stop-grad)
            gomega = (
                g_rec_omega[k]
                + gcx * col[g, 0] + gcy * col[g, 1] + gcz * col[g, 2]
                + gzp * z
                + sg * (gnx * nx + gny * ny + gnz * nz)
                + ga
            )
            dalpha = gomega * T - S / (1.0 - alpha)
            S += gomega * omega

            # attribute gradients carried by the blend weight
            d_col[g, 0] += omega * gcx
            d_col[g, 1] += omega * gcy
            d_col[g, 2] += omega * gcz
            for c in range(4):
                d_sem[g, c] += omega * g_sem[pix, c]
            d_frame[g, 0, 2] += sg * omega * gnx
            d_frame[g, 1, 2] += sg * omega * gny
            d_frame[g, 2, 2] += sg * omega * gnz

            # recompute intersection intermediates
            denom = nx * dx + ny * dy + nz * dz
            traw = z / cfac[pix]
            ex = origin[0] + traw * dx - pos[g, 0]
            ey = origin[1] + traw * dy - pos[g, 1]
            ez = origin[2] + traw * dz - pos[g, 2]
            su, sv = sc[g, 0], sc[g, 1]
            u = (ex * fr[g, 0, 0] + ey * fr[g, 1, 0] + ez * fr[g, 2, 0]) / su
            v = (ex * fr[g, 0, 1] + ey * fr[g, 1, 1] + ez * fr[g, 2, 1]) / sv
            G = alpha / op[g]

            d_op[g] += G * dalpha
            dG = op[g] * dalpha
            du = -dG * u * G
            dv = -dG * v * G

            d_sc[g, 0] += du * (-u / su)
            d_sc[g, 1] += dv * (-v / sv)
            d_frame[g, 0, 0] += du * ex / su
            d_frame[g, 1, 0] += du * ey / su
            d_frame[g, 2, 0] += du * ez / su
            d_frame[g, 0, 1] += dv * ex / sv
            d_frame[g, 1, 1] += dv * ey / sv
            d_frame[g, 2, 1] += dv * ez / sv

            ddx = du * fr[g, 0, 0] / su + dv * fr[g, 0, 1] / sv
            ddy = du * fr[g, 1, 0] / su + dv * fr[g, 1, 1] / sv
            ddz = du * fr[g, 2, 0] / su + dv * fr[g, 2, 1] / sv

            dz_attr = omega * gzp + g_rec_z[k]
            dtraw = ddx * dx + ddy * dy + ddz * dz + dz_attr * cfac[pix]

            d_pos[g, 0] += -ddx + dtraw * nx / denom
            d_pos[g, 1] += -ddy + dtraw * ny / denom
            d_pos[g, 2] += -ddz + dtraw * nz / denom
            d_frame[g, 0, 2] += dtraw * (-ex) / denom
            d_frame[g, 1, 2] += dtraw * (-ey) / denom
            d_frame[g, 2, 2] += dtraw * (-ez) / denom


def _pixel_rays_unit(cam: Camera):
    raw = cam.pixel_rays(cam.pixel_grid()).reshape(-1, 3)
    norm = np.linalg.norm(raw, axis=-1)
    return raw / norm[:, None], 1.0 / norm  # unit dirs, z per unit ray length


def _tile_bins(batch: SurfelBatch, cam: Camera, cfg: RenderConfig):
    """Conservative per-tile surfel lists.

    A surfel can only blend where its intersection point lies inside the
    world-space sphere of radius cutoff_sigma * max(scale); the sphere's cube
    is projected and its pixel bbox (padded) covers every such pixel.
    Surfels whose cube is not fully in front of the camera cover all tiles.
    """
    M = len(batch)
    ts = cfg.tile_size
    ntx = (cam.width + ts - 1) // ts
    nty = (cam.height + ts - 1) // ts
    ntiles = ntx * nty

    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 2.0 * np.log(batch.opacity / cfg.alpha_cutoff)
    visible = r2 > 0
    radius = np.zeros(M)
    radius[visible] = np.sqrt(r2[visible]) * batch.scale[visible].max(axis=1)

    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    pts = batch.position[:, None, :] + radius[:, None, None] * corners[None, :, :]
    px, z = cam.project(pts.reshape(-1, 3))
    px = px.reshape(M, 8, 2)
    z = z.reshape(M, 8)
    in_front = np.all(z > cfg.near, axis=1)
    # a support cube entirely behind the near plane can never blend above
    # the cutoff: every intersection with z > near lies outside the support
    behind = np.all(z <= cfg.near, axis=1)

    x0 = np.zeros(M, dtype=np.int64)
    x1 = np.full(M, ntx - 1, dtype=np.int64)
    y0 = np.zeros(M, dtype=np.int64)
    y1 = np.full(M, nty - 1, dtype=np.int64)
    f = visible & in_front
    pad = 1.0
    x0[f] = np.clip(np.floor((px[f, :, 0].min(axis=1) - pad) / ts), 0, ntx - 1)
    x1[f] = np.clip(np.floor((px[f, :, 0].max(axis=1) + pad) / ts), 0, ntx - 1)
    y0[f] = np.clip(np.floor((px[f, :, 1].min(axis=1) - pad) / ts), 0, nty - 1)
    y1[f] = np.clip(np.floor((px[f, :, 1].max(axis=1) + pad) / ts), 0, nty - 1)
    # fully off-screen visible surfels
    off = f & (
        (px[:, :, 0].max(axis=1) < -pad) | (px[:, :, 0].min(axis=1) > cam.width + pad)
        | (px[:, :, 1].max(axis=1) < -pad) | (px[:, :, 1].min(axis=1) > cam.height + pad)
    )
    # surfels straddling the near plane cover all tiles, but most lie far
    # outside the viewing cone: cull when the support sphere misses all four
    # frustum side planes (planes through the camera center, inward normals)
    a_l = (0.0 - pad - cam.cx) / cam.fx
    a_r = (cam.width - 1 + pad - cam.cx) / cam.fx
    b_t = (0.0 - pad - cam.cy) / cam.fy
    b_b = (cam.height - 1 + pad - cam.cy) / cam.fy
    pc = cam.to_cam(batch.position)
    side_normals = np.array([
        [1.0, 0.0, -a_l],
        [-1.0, 0.0, a_r],
        [0.0, 1.0, -b_t],
        [0.0, -1.0, b_b],
    ])
    side_normals /= np.linalg.norm(side_normals, axis=1, keepdims=True)
    dist = pc @ side_normals.T  # (M, 4) signed distances
    outside_cone = np.any(dist < -radius[:, None], axis=1)

    keep = visible & ~off & ~behind & ~outside_cone

    ids = np.flatnonzero(keep)
    span_x = x1 - x0 + 1
    span_y = y1 - y0 + 1
    counts_per = (span_x * span_y)[ids]
    rep = np.repeat(ids, counts_per)
    cum = np.zeros(len(ids) + 1, dtype=np.int64)
    np.cumsum(counts_per, out=cum[1:])
    local = np.arange(cum[-1], dtype=np.int64) - np.repeat(cum[:-1], counts_per)
    wloc = span_x[rep]
    tiles = (y0[rep] + local // wloc) * ntx + (x0[rep] + local % wloc)
    counts = np.bincount(tiles, minlength=ntiles)
    tile_start = np.zeros(ntiles + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_start[1:])
    tile_items = rep[np.argsort(tiles, kind="stable")]

    # per-surfel pixel-space support bboxes for the in-kernel reject test;
    # surfels straddling the near plane get an unbounded bbox
    bxmin = np.full(M, -np.inf)
    bxmax = np.full(M, np.inf)
    bymin = np.full(M, -np.inf)
    bymax = np.full(M, np.inf)
    bxmin[f] = px[f, :, 0].min(axis=1) - pad
    bxmax[f] = px[f, :, 0].max(axis=1) + pad
    bymin[f] = px[f, :, 1].min(axis=1) - pad
    bymax[f] = px[f, :, 1].max(axis=1) + pad

    ug, vg = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pix_tile = (vg // ts) * ntx + (ug // ts)
    bboxes = (bxmin[tile_items], bxmax[tile_items],
              bymin[tile_items], bymax[tile_items])
    return pix_tile.reshape(-1).astype(np.int64), tile_start, tile_items, bboxes


def _surfel_sigma(batch: SurfelBatch, origin: np.ndarray) -> np.ndarray:
    """Camera-facing sign per surfel: flip so normal . view_direction < 0."""
    n = batch.frame[:, :, 2]
    dots = np.einsum("mc,mc->m", n, batch.position - origin)
    return np.where(dots > 0, -1.0, 1.0)


def render(
    batch: SurfelBatch, cam: Camera, cfg: RenderConfig = None, brute_force: bool = False
) -> RenderBuffers:
    cfg = cfg or RenderConfig()
    H, W = cam.height, cam.width
    npix = H * W
    origin = cam.center
    dirs, cfac = _pixel_rays_unit(cam)
    M = len(batch)

    if brute_force or M == 0:
        pix_tile = np.zeros(npix, dtype=np.int64)
        tile_start = np.array([0, M], dtype=np.int64)
        tile_items = np.arange(M, dtype=np.int64)
        inf = np.full(M, np.inf)  # one entry per tile item
        bboxes = (-inf, inf, -inf, inf)
    else:
        pix_tile, tile_start, tile_items, bboxes = _tile_bins(batch, cam, cfg)
    grid_uv = cam.pixel_grid().reshape(-1, 2)
    pu = np.ascontiguousarray(grid_uv[:, 0])
    pv = np.ascontiguousarray(grid_uv[:, 1])

    sigma = _surfel_sigma(batch, origin)

    cap = int(np.sum((tile_start[1:] - tile_start[:-1])[pix_tile])) if M else 0
    out_color = np.zeros((npix, 3))
    out_depth = np.zeros(npix)
    out_normal = np.zeros((npix, 3))
    out_sem = np.zeros((npix, 4))
    out_acc = np.zeros(npix)
    rec_gid = np.empty(cap, dtype=np.int64)
    rec_z = np.empty(cap)
    rec_alpha = np.empty(cap)
    rec_omega = np.empty(cap)
    rec_trans = np.empty(cap)
    px_count = np.zeros(npix, dtype=np.int64)

    if M:
        nrec = _forward_kernel(
            origin, dirs, cfac, pix_tile, tile_start, tile_items,
            pu, pv, bboxes[0], bboxes[1], bboxes[2], bboxes[3],
            batch.position, batch.frame, batch.scale, batch.opacity,
            batch.color, batch.sem, sigma,
            cfg.near, cfg.alpha_cutoff, cfg.term_transmittance,
            out_color, out_depth, out_normal, out_sem, out_acc,
            rec_gid, rec_z, rec_alpha, rec_omega, rec_trans, px_count,
        )
    else:
        nrec = 0

    px_start = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(px_count, out=px_start[1:])
    return RenderBuffers(
        color=out_color.reshape(H, W, 3),
        depth=out_depth.reshape(H, W),
        normal=out_normal.reshape(H, W, 3),
        sem=out_sem.reshape(H, W, 4),
        acc_alpha=out_acc.reshape(H, W),
        rec_gid=rec_gid[:nrec].copy(),
        rec_z=rec_z[:nrec].copy(),
        rec_alpha=rec_alpha[:nrec].copy(),
        rec_omega=rec_omega[:nrec].copy(),
        rec_trans=rec_trans[:nrec].copy(),
        px_start=px_start,
        _batch_token=id(batch),
    )


def render_backward(
    batch: SurfelBatch,
    cam: Camera,
    buffers: RenderBuffers,
    cfg: RenderConfig = None,
    d_color: np.ndarray = None,
    d_depth: np.ndarray = None,
    d_normal: np.ndarray = None,
    d_sem: np.ndarray = None,
    d_acc: np.ndarray = None,
    d_rec_omega: np.ndarray = None,
    d_rec_z: np.ndarray = None,
) -> SurfelGrads:
    """Exact reverse of the blend and intersection math.

    Pixel-level gradients come in image shape; d_rec_omega / d_rec_z address
    the stored blend records directly (losses over blend records use these).
    Semantic gradients flow only into per-surfel semantics (stop-gradient).
    """
    cfg = cfg or RenderConfig()
    if buffers._batch_token != id(batch):
        raise RenderContractError("backward called with a non-matching forward batch")
    H, W = cam.height, cam.width
    npix = H * W
    nrec = len(buffers.rec_gid)

    def px(arr, ch):
        if arr is None:
            return np.zeros((npix, ch) if ch > 1 else npix)
        return np.ascontiguousarray(arr, dtype=np.float64).reshape(
            (npix, ch) if ch > 1 else npix
        )

    g_color = px(d_color, 3)
    g_depth = px(d_depth, 1)
    g_normal = px(d_normal, 3)
    g_sem = px(d_sem, 4)
    g_acc = px(d_acc, 1)
    g_rec_omega = (
        np.zeros(nrec) if d_rec_omega is None
        else np.asarray(d_rec_omega, dtype=np.float64)
    )
    g_rec_z = (
        np.zeros(nrec) if d_rec_z is None else np.asarray(d_rec_z, dtype=np.float64)
    )

    grads = SurfelGrads(batch)
    if nrec:
        origin = cam.center
        dirs, cfac = _pixel_rays_unit(cam)
        sigma = _surfel_sigma(batch, origin)
        _backward_kernel(
            origin, dirs, cfac,
            batch.position, batch.frame, batch.scale, batch.opacity,
            batch.color, batch.sem, sigma,
            buffers.rec_gid, buffers.rec_z, buffers.rec_alpha,
            buffers.rec_omega, buffers.rec_trans, buffers.px_start,
            g_color, g_depth, g_normal, g_sem, g_acc, g_rec_omega, g_rec_z,
            grads.position, grads.opacity, grads.scale, grads.frame,
            grads.color, grads.sem,
        )
    return grads
