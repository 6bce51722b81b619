"""Attribute decoders: per-voxel MLPs mapping features to surfel attributes.

The geometry decoder reads the geometry feature and emits opacity, 2D scale
and rotation for all K slots of a voxel in one pass; its color branch
additionally sees the (raw) per-voxel view direction.  The semantic decoder
reads the semantic feature and emits a 4-class probability per slot.
Gradients are derived by hand and exercised against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import InvalidInputError, quat_to_rotation, rotation_grad_to_quat
from .grid import SparseVoxelGrid

GEO_PARAM_KEYS = (
    "g1W", "g1b", "g2W", "g2b",
    "aW", "ab", "sW", "sb", "qW", "qb",
    "c1W", "c1b", "c2W", "c2b", "cW", "cb",
)
SEM_PARAM_KEYS = ("m1W", "m1b", "mW", "mb")


class DecodeError(RuntimeError):
    pass


class ContractViolationError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_decoder_params(
    feature_dim: int, K: int, hidden: int = 64, seed: int = 0,
    init_opacity: float = 0.1,
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)

    def w(shape):
        return rng.standard_normal(shape) / np.sqrt(shape[0])

    p = {
        "g1W": w((feature_dim, hidden)), "g1b": np.zeros(hidden),
        "g2W": w((hidden, hidden)), "g2b": np.zeros(hidden),
        "aW": w((hidden, K)),
        "ab": np.full(K, np.log(init_opacity / (1 - init_opacity))),
        "sW": w((hidden, 2 * K)), "sb": np.zeros(2 * K),
        "qW": 1e-2 * w((hidden, 4 * K)),
        "qb": np.tile([1.0, 0.0, 0.0, 0.0], K),
        "c1W": w((feature_dim + 3, hidden)), "c1b": np.zeros(hidden),
        "c2W": w((hidden, hidden)), "c2b": np.zeros(hidden),
        "cW": w((hidden, 3 * K)), "cb": np.zeros(3 * K),
        "m1W": w((feature_dim, hidden)), "m1b": np.zeros(hidden),
        "mW": w((hidden, 4 * K)), "mb": np.zeros(4 * K),
    }
    return p


@dataclass
class SurfelBatch:
    """Decoded per-Gaussian attributes, voxel-major (all K slots contiguous)."""

    position: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    scale: np.ndarray  # (M, 2)
    quat: np.ndarray  # (M, 4) unit norm
    frame: np.ndarray  # (M, 3, 3) columns (t_u, t_v, n)
    color: np.ndarray  # (M, 3)
    sem: np.ndarray  # (M, 4) probability simplex
    voxel_index: np.ndarray  # (M,)
    slot: np.ndarray  # (M,)

    def __len__(self):
        return len(self.position)

    def check_invariants(self):
        assert np.all((self.opacity > 0) & (self.opacity < 1))
        assert np.all(self.scale > 0)
        assert np.allclose(np.linalg.norm(self.quat, axis=-1), 1.0, atol=1e-9)
        assert np.allclose(self.sem.sum(axis=-1), 1.0, atol=1e-6)


class SurfelGrads:
    """Zero-initialized upstream gradient buffers matching a SurfelBatch."""

    def __init__(self, batch: SurfelBatch):
        m = len(batch)
        self.position = np.zeros((m, 3))
        self.opacity = np.zeros(m)
        self.scale = np.zeros((m, 2))
        self.frame = np.zeros((m, 3, 3))
        self.color = np.zeros((m, 3))
        self.sem = np.zeros((m, 4))


class AttributeDecoder:
    """Geometry + semantic decoders with a recorded tape for backprop."""

    QUAT_EPS = 1e-8

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self._tape = None

    @property
    def K(self) -> int:
        return self.params["aW"].shape[1]

    def forward(self, grid: SparseVoxelGrid, cam_center: np.ndarray) -> SurfelBatch:
        p = self.params
        Vg, Vs = grid.geom_feat, grid.sem_feat
        if not np.all(np.isfinite(Vg)):
            bad = np.flatnonzero(~np.isfinite(Vg).all(axis=1))[0]
            raise DecodeError(f"non-finite geometry feature in voxel {bad}")
        if not np.all(np.isfinite(Vs)):
            bad = np.flatnonzero(~np.isfinite(Vs).all(axis=1))[0]
            raise DecodeError(f"non-finite semantic feature in voxel {bad}")
        N, K = grid.num_voxels, self.K
        if N == 0:
            raise InvalidInputError("cannot decode an empty grid")
        centers = grid.centers
        view = centers - np.asarray(cam_center, dtype=np.float64)
        view_norm = np.linalg.norm(view, axis=-1, keepdims=True)
        view_norm = np.maximum(view_norm, 1e-12)
        d = view / view_norm

        # geometry trunk
        z1 = Vg @ p["g1W"] + p["g1b"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["g2W"] + p["g2b"]
        h2 = np.maximum(z2, 0.0)

        a_pre = h2 @ p["aW"] + p["ab"]  # (N, K)
        opacity = sigmoid(a_pre)

        s_pre = (h2 @ p["sW"] + p["sb"]).reshape(N, K, 2)
        sp = softplus(s_pre)
        l = grid.scaling
        scale = l[:, None, None] * sp

        q_raw = (h2 @ p["qW"] + p["qb"]).reshape(N, K, 4)
        q_norm = np.linalg.norm(q_raw, axis=-1)
        degen = q_norm < self.QUAT_EPS
        q_safe = q_raw.copy()
        q_safe[degen] = [1.0, 0.0, 0.0, 0.0]
        q_unit = q_safe / np.linalg.norm(q_safe, axis=-1, keepdims=True)

        # color branch sees features plus raw view direction
        xin = np.concatenate([Vg, d], axis=1)
        y1 = xin @ p["c1W"] + p["c1b"]
        u1 = np.maximum(y1, 0.0)
        y2 = u1 @ p["c2W"] + p["c2b"]
        u2 = np.maximum(y2, 0.0)
        c_pre = (u2 @ p["cW"] + p["cb"]).reshape(N, K, 3)
        color = sigmoid(c_pre)

        # semantic branch
        w1 = Vs @ p["m1W"] + p["m1b"]
        t1 = np.maximum(w1, 0.0)
        logits = (t1 @ p["mW"] + p["mb"]).reshape(N, K, 4)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        zprob = e / e.sum(axis=-1, keepdims=True)

        position = (centers[:, None, :] + l[:, None, None] * grid.offsets)

        M = N * K
        frame = quat_to_rotation(q_unit.reshape(M, 4))
        batch = SurfelBatch(
            position=position.reshape(M, 3),
            opacity=opacity.reshape(M),
            scale=scale.reshape(M, 2),
            quat=q_unit.reshape(M, 4),
            frame=frame,
            color=color.reshape(M, 3),
            sem=zprob.reshape(M, 4),
            voxel_index=np.repeat(np.arange(N), K),
            slot=np.tile(np.arange(K), N),
        )
        self._tape = dict(
            grid=grid, N=N, K=K, d=d, z1=z1, h1=h1, z2=z2, h2=h2,
            a_pre=a_pre, opacity=opacity, s_pre=s_pre, sp=sp, scale=scale,
            q_raw=q_raw, q_safe=q_safe, q_unit=q_unit, degen=degen,
            xin=xin, y1=y1, u1=u1, y2=y2, u2=u2, c_pre=c_pre, color=color,
            w1=w1, t1=t1, zprob=zprob,
        )
        return batch

    def backward(self, g: SurfelGrads) -> dict[str, np.ndarray]:
        """Reverse the decode pass.

        Returns gradients for the grid ('geom_feat', 'sem_feat', 'offsets',
        'log_scaling') and for every MLP parameter key.
        """
        if self._tape is None:
            raise ContractViolationError("backward called without a forward pass")
        t = self._tape
        p = self.params
        grid: SparseVoxelGrid = t["grid"]
        N, K = t["N"], t["K"]
        l = grid.scaling
        grads = {}

        d_pos = g.position.reshape(N, K, 3)
        d_op = g.opacity.reshape(N, K)
        d_scale = g.scale.reshape(N, K, 2)
        d_frame = g.frame
        d_color = g.color.reshape(N, K, 3)
        d_sem = g.sem.reshape(N, K, 4)

        # position p = v + l * delta
        grads["offsets"] = l[:, None, None] * d_pos
        d_logl = np.einsum(
            "nkc,nkc->n", d_pos, l[:, None, None] * grid.offsets
        )

        # opacity head
        d_a_pre = d_op * t["opacity"] * (1 - t["opacity"])

        # scale head: scale = l * softplus(s_pre)
        d_logl += np.einsum("nkc,nkc->n", d_scale, t["scale"])
        d_s_pre = d_scale * l[:, None, None] * sigmoid(t["s_pre"])

        # rotation head through normalization (degenerate slots frozen)
        dq_unit = rotation_grad_to_quat(t["q_unit"].reshape(-1, 4), d_frame)
        dq_unit = dq_unit.reshape(N, K, 4)
        qs = t["q_safe"]
        qn = np.linalg.norm(qs, axis=-1, keepdims=True)
        qu = t["q_unit"]
        d_q_raw = (dq_unit - qu * np.sum(dq_unit * qu, axis=-1, keepdims=True)) / qn
        d_q_raw[t["degen"]] = 0.0

        grads["log_scaling"] = d_logl

        # color head
        d_c_pre = d_color * t["color"] * (1 - t["color"])

        # semantic head (softmax)
        zp = t["zprob"]
        d_logits = zp * (d_sem - np.sum(d_sem * zp, axis=-1, keepdims=True))

        # geometry trunk backward
        d_h2 = (
            d_a_pre @ p["aW"].T
            + d_s_pre.reshape(N, -1) @ p["sW"].T
            + d_q_raw.reshape(N, -1) @ p["qW"].T
        )
        grads["aW"] = t["h2"].T @ d_a_pre
        grads["ab"] = d_a_pre.sum(axis=0)
        grads["sW"] = t["h2"].T @ d_s_pre.reshape(N, -1)
        grads["sb"] = d_s_pre.reshape(N, -1).sum(axis=0)
        grads["qW"] = t["h2"].T @ d_q_raw.reshape(N, -1)
        grads["qb"] = d_q_raw.reshape(N, -1).sum(axis=0)

        d_z2 = d_h2 * (t["z2"] > 0)
        grads["g2W"] = t["h1"].T @ d_z2
        grads["g2b"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ p["g2W"].T
        d_z1 = d_h1 * (t["z1"] > 0)
        grads["g1W"] = grid.geom_feat.T @ d_z1
        grads["g1b"] = d_z1.sum(axis=0)
        d_Vg = d_z1 @ p["g1W"].T

        # color branch backward
        d_u2 = d_c_pre.reshape(N, -1) @ p["cW"].T
        grads["cW"] = t["u2"].T @ d_c_pre.reshape(N, -1)
        grads["cb"] = d_c_pre.reshape(N, -1).sum(axis=0)
        d_y2 = d_u2 * (t["y2"] > 0)
        grads["c2W"] = t["u1"].T @ d_y2
        grads["c2b"] = d_y2.sum(axis=0)
        d_u1 = d_y2 @ p["c2W"].T
        d_y1 = d_u1 * (t["y1"] > 0)
        grads["c1W"] = t["xin"].T @ d_y1
        grads["c1b"] = d_y1.sum(axis=0)
        d_Vg += (d_y1 @ p["c1W"].T)[:, : grid.feature_dim]
        grads["geom_feat"] = d_Vg

        # semantic branch backward
        d_t1 = d_logits.reshape(N, -1) @ p["mW"].T
        grads["mW"] = t["t1"].T @ d_logits.reshape(N, -1)
        grads["mb"] = d_logits.reshape(N, -1).sum(axis=0)
        d_w1 = d_t1 * (t["w1"] > 0)
        grads["m1W"] = grid.sem_feat.T @ d_w1
        grads["m1b"] = d_w1.sum(axis=0)
        grads["sem_feat"] = d_w1 @ p["m1W"].T
        return grads
