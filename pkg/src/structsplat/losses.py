"""Training losses and the weighted total objective.

All losses return the scalar plus analytic gradients w.r.t. their optimizable
inputs; gradients are hand-derived and covered by finite-difference tests.
Scale/shift for the depth prior and all probability weights are evaluated at
the current iterate and treated as constants in the backward pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
from numba import njit
from scipy.ndimage import correlate1d

from .geometry import InvalidInputError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window()
_WINDOW_1D = _WINDOW[(SSIM_WINDOW - 1) // 2].copy()
_WINDOW_1D /= _WINDOW_1D.sum()
_HALF = (SSIM_WINDOW - 1) // 2


def _conv_valid(img: np.ndarray) -> np.ndarray:
    """Valid-mode correlation with the (separable, symmetric) SSIM window."""
    out = correlate1d(img, _WINDOW_1D, axis=0, mode="constant")
    out = correlate1d(out, _WINDOW_1D, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _conv_full(img: np.ndarray) -> np.ndarray:
    """Full-mode convolution with the SSIM window (adjoint of _conv_valid)."""
    padded = np.zeros((img.shape[0] + 2 * _HALF, img.shape[1] + 2 * _HALF))
    padded[_HALF:-_HALF, _HALF:-_HALF] = img
    out = correlate1d(padded, _WINDOW_1D, axis=0, mode="constant")
    return correlate1d(out, _WINDOW_1D, axis=1, mode="constant")


def ssim_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM between images x, y in [0,1] (H, W) or (H, W, C), with the
    gradient w.r.t. x.  Gaussian 11x11 window, valid-mode (no padding)."""
    if x.shape != y.shape:
        raise InvalidInputError("ssim: shape mismatch")
    orig_shape = x.shape
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w, c = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InvalidInputError("ssim: image smaller than the 11x11 window")
    grad = np.zeros_like(x)
    total = 0.0
    n_maps = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * c
    for ch in range(c):
        xc, yc = x[..., ch], y[..., ch]
        mu_x = _conv_valid(xc)
        mu_y = _conv_valid(yc)
        e_xx = _conv_valid(xc * xc)
        e_yy = _conv_valid(yc * yc)
        e_xy = _conv_valid(xc * yc)
        var_x = e_xx - mu_x**2
        var_y = e_yy - mu_y**2
        cov = e_xy - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + SSIM_C1
        a2 = 2 * cov + SSIM_C2
        b1 = mu_x**2 + mu_y**2 + SSIM_C1
        b2 = var_x + var_y + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += s.sum()

        # partials of the SSIM map w.r.t. (mu_x, var_x, cov), then chain
        # back through mu_x = w*x, e_xx = w*x^2, e_xy = w*(x y)
        d_mu = (2 * mu_y * a2 * b1 - 2 * mu_x * a1 * a2) / (b1**2 * b2)
        d_var = -(a1 * a2) / (b1 * b2**2)
        d_cov = 2 * a1 / (b1 * b2)
        g_mu = d_mu + d_var * (-2 * mu_x) + d_cov * (-mu_y)
        g_exx = d_var
        g_exy = d_cov
        # adjoint of a valid-mode correlation with a symmetric window is a
        # full-mode convolution with the same window
        grad[..., ch] = (
            _conv_full(g_mu)
            + _conv_full(g_exx) * 2 * xc
            + _conv_full(g_exy) * yc
        )
    return float(total / n_maps), grad.reshape(orig_shape) / n_maps


def loss_rgb(
    rendered: np.ndarray, target: np.ndarray, ssim_mix: float = 0.2
) -> tuple[float, np.ndarray]:
    """(1 - ssim_mix) * L1 + ssim_mix * (1 - SSIM)."""
    if rendered.shape != target.shape:
        raise InvalidInputError("loss_rgb: shape mismatch")
    diff = rendered - target
    n = diff.size
    l1 = float(np.abs(diff).sum() / n)
    grad = (1.0 - ssim_mix) * np.sign(diff) / n
    if ssim_mix > 0.0:
        s, gs = ssim_with_grad(rendered, target)
        return (1.0 - ssim_mix) * l1 + ssim_mix * (1.0 - s), grad - ssim_mix * gs
    return l1, grad


@dataclass
class ScaleShift:
    w: float
    q: float
    degenerate: bool = False


def align_scale_shift(depth: np.ndarray, prior: np.ndarray, mask: np.ndarray) -> ScaleShift:
    """Least-squares (w, q) minimizing sum over mask of (w*D + q - Dhat)^2."""
    d = depth[mask].astype(np.float64)
    p = prior[mask].astype(np.float64)
    n = d.size
    if n == 0:
        return ScaleShift(0.0, 0.0, True)
    sd, sdd = d.sum(), (d * d).sum()
    det = n * sdd - sd * sd
    if n < 2 or det <= 1e-12 * max(1.0, n * sdd):
        return ScaleShift(0.0, float(p.mean()), True)
    sp, sdp = p.sum(), (d * p).sum()
    w = (n * sdp - sd * sp) / det
    q = (sdd * sp - sd * sdp) / det
    return ScaleShift(float(w), float(q), False)


def loss_depth(
    depth: np.ndarray,
    prior: np.ndarray,
    mask: np.ndarray,
    align: ScaleShift = None,
) -> tuple[float, np.ndarray]:
    """Mean squared residual after scale/shift alignment; (w, q) are
    constants of the current iterate, so the gradient is 2w·r/n on the mask."""
    if align is None:
        align = align_scale_shift(depth, prior, mask)
    n = int(mask.sum())
    grad = np.zeros_like(depth)
    if n == 0:
        warnings.warn("loss_depth: empty mask", RuntimeWarning)
        return 0.0, grad
    r = np.where(mask, align.w * depth + align.q - prior, 0.0)
    grad[mask] = 2.0 * align.w * r[mask] / n
    return float(np.sum(r * r) / n), grad


def loss_normal(
    rendered: np.ndarray,
    nd: np.ndarray,
    prior: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over the mask of (1 - N.Nhat) + (1 - N_d.Nhat).

    The rendered normal buffer is an alpha-weighted sum, so it is normalized
    here (with gradient); pixels where it is near zero are dropped.  nd and
    the prior are assumed unit length.
    """
    norm = np.linalg.norm(rendered, axis=-1)
    valid = mask & (norm > 1e-12)
    n = int(valid.sum())
    g_rendered = np.zeros_like(rendered)
    g_nd = np.zeros_like(nd)
    if n == 0:
        return 0.0, g_rendered, g_nd
    safe = np.where(valid, norm, 1.0)[..., None]
    unit = rendered / safe
    term1 = 1.0 - np.sum(unit * prior, axis=-1)
    term2 = 1.0 - np.sum(nd * prior, axis=-1)
    loss = float(np.sum(np.where(valid, term1 + term2, 0.0)) / n)
    # d(unit)/d(rendered) = (I - uu^T)/|v|
    g_unit = np.where(valid[..., None], -prior / n, 0.0)
    proj = np.sum(g_unit * unit, axis=-1, keepdims=True)
    g_rendered[...] = (g_unit - unit * proj) / safe
    g_nd[...] = np.where(valid[..., None], -prior / n, 0.0)
    return loss, g_rendered, g_nd


def loss_semantic(
    sem_buffer: np.ndarray,
    acc_alpha: np.ndarray,
    labels: np.ndarray,
    acc_threshold: float = 0.5,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the acc-normalized rendered class probabilities
    against integer labels, over pixels with acc_alpha >= threshold.
    Probabilities are clamped to [1e-7, 1]; gradient flows into the rendered
    semantic buffer only (upstream stop-gradient keeps geometry fixed)."""
    valid = acc_alpha >= acc_threshold
    n = int(valid.sum())
    grad = np.zeros_like(sem_buffer)
    if n == 0:
        return 0.0, grad
    acc = np.where(valid, acc_alpha, 1.0)
    picked = np.take_along_axis(sem_buffer, labels[..., None], axis=-1)[..., 0]
    ratio = picked / acc
    p = np.clip(ratio, 1e-7, 1.0)
    loss = float(np.sum(np.where(valid, -np.log(p), 0.0)) / n)
    inside = valid & (ratio > 1e-7) & (ratio < 1.0)
    g_picked = np.where(inside, -1.0 / (p * acc * n), 0.0)
    np.put_along_axis(grad, labels[..., None], g_picked[..., None], axis=-1)
    return loss, grad


def _segment_exclusive_sums(values: np.ndarray, px_start: np.ndarray):
    """Per-record exclusive prefix and suffix sums within each pixel segment."""
    cs = np.concatenate([[0.0], np.cumsum(values)])
    starts = np.repeat(px_start[:-1], np.diff(px_start))
    ends = np.repeat(px_start[1:], np.diff(px_start))
    idx = np.arange(len(values))
    prefix = cs[idx] - cs[starts]
    suffix = (cs[ends] - cs[idx + 1])
    return prefix, suffix


@njit(cache=True)
def _distortion_kernel(omega, z, px_start, g_omega, g_z):
    loss = 0.0
    for px in range(len(px_start) - 1):
        s, e = px_start[px], px_start[px + 1]
        a_pre = 0.0
        b_pre = 0.0
        for r in range(s, e):
            w = omega[r]
            zr = z[r]
            loss += 2.0 * w * (zr * a_pre - b_pre)
            g_omega[r] = 2.0 * (zr * a_pre - b_pre)
            g_z[r] = 2.0 * w * a_pre
            a_pre += w
            b_pre += w * zr
        a_suf = 0.0
        b_suf = 0.0
        for r in range(e - 1, s - 1, -1):
            w = omega[r]
            zr = z[r]
            g_omega[r] += 2.0 * (b_suf - zr * a_suf)
            g_z[r] -= 2.0 * w * a_suf
            a_suf += w
            b_suf += w * zr
    return loss


def loss_distortion(buffers) -> tuple[float, np.ndarray, np.ndarray]:
    """Per pixel sum over ordered record pairs of w_i w_j |z_i - z_j|,
    averaged over all pixels.  Returns (loss, d_rec_omega, d_rec_z) for the
    rasterizer's record-level backward.

    Records are depth-sorted within a pixel, so the pairwise double sum
    telescopes into running prefix/suffix sums (single pass per direction).
    """
    omega = buffers.rec_omega
    z = buffers.rec_z
    px_start = buffers.px_start
    n_px = len(px_start) - 1
    g_omega = np.zeros_like(omega)
    g_z = np.zeros_like(z)
    if len(omega) == 0:
        return 0.0, g_omega, g_z
    loss = _distortion_kernel(omega, z, px_start, g_omega, g_z)
    g_omega /= n_px
    g_z /= n_px
    return float(loss / n_px), g_omega, g_z


@njit(cache=True)
def _normal_consistency_kernel(
    omega, gid, px_start, ori, nd_flat, valid_flat, n_valid,
    g_omega, g_normals, g_nd_flat,
):
    loss = 0.0
    inv = 1.0 / n_valid
    for px in range(len(px_start) - 1):
        if not valid_flat[px]:
            continue
        for r in range(px_start[px], px_start[px + 1]):
            g = gid[r]
            d = (ori[g, 0] * nd_flat[px, 0]
                 + ori[g, 1] * nd_flat[px, 1]
                 + ori[g, 2] * nd_flat[px, 2])
            w = omega[r]
            loss += w * (1.0 - d)
            g_omega[r] = (1.0 - d) * inv
            c = w * inv
            for k in range(3):
                g_normals[g, k] -= c * nd_flat[px, k]
                g_nd_flat[px, k] -= c * ori[g, k]
    return loss * inv


def loss_normal_consistency(
    buffers,
    oriented_normals: np.ndarray,
    nd: np.ndarray,
    nd_valid: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Per pixel sum of w_i (1 - n_i . N_d), averaged over pixels with a
    valid depth-derived normal.

    oriented_normals are per-surfel camera-facing normals (M, 3); N_d comes
    from the rendered depth.  Returns (loss, d_rec_omega, d_normals, g_nd):
    d_normals accumulates per surfel, g_nd chains into the depth map via the
    depth-to-normal backward.
    """
    px_start = buffers.px_start
    gid = buffers.rec_gid
    omega = buffers.rec_omega
    g_omega = np.zeros_like(omega)
    g_normals = np.zeros_like(oriented_normals)
    g_nd = np.zeros_like(nd)
    n_valid = int(nd_valid.sum())
    if n_valid == 0 or len(omega) == 0:
        return 0.0, g_omega, g_normals, g_nd
    nd_flat = np.ascontiguousarray(nd.reshape(-1, 3))
    valid_flat = np.ascontiguousarray(nd_valid.ravel())
    g_nd_flat = np.zeros_like(nd_flat)
    loss = _normal_consistency_kernel(
        omega, gid, px_start, np.ascontiguousarray(oriented_normals),
        nd_flat, valid_flat, n_valid, g_omega, g_normals, g_nd_flat,
    )
    g_nd[...] = g_nd_flat.reshape(nd.shape)
    return float(loss), g_omega, g_normals, g_nd


@dataclass
class LossWeights:
    depth: float = 0.25
    normal: float = 0.1
    reg: float = 0.1
    semantic: float = 1.0
    distortion: float = 100.0
    normal_consistency: float = 0.05
    ssim_mix: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidInputError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    rgb: float = 0.0
    depth: float = 0.0
    normal: float = 0.0
    reg3d: float = 0.0
    reg2d: float = 0.0
    semantic: float = 0.0
    distortion: float = 0.0
    normal_consistency: float = 0.0
    total: float = 0.0

    COLUMNS = ("rgb", "depth", "normal", "reg3d", "reg2d", "semantic",
               "distortion", "normal_consistency", "total")

    def log_line(self, step: int) -> str:
        vals = " ".join(f"{name}={getattr(self, name):.6g}" for name in self.COLUMNS)
        return f"step={step} {vals}"


def total_loss(report: LossReport, weights: LossWeights) -> LossReport:
    """Fill in the weighted total: L = L_rgb + l1 L_depth + l2 L_normal
    + l3 (L_3D + L_2D) + l4 L_sem + l5 L_dist + l6 L_nc."""
    report.total = (
        report.rgb
        + weights.depth * report.depth
        + weights.normal * report.normal
        + weights.reg * (report.reg3d + report.reg2d)
        + weights.semantic * report.semantic
        + weights.distortion * report.distortion
        + weights.normal_consistency * report.normal_consistency
    )
    return report
