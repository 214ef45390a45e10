"""Hierarchical point-cloud regression of hemodynamic fields.

Surface points with per-point descriptors pass through two set-abstraction
stages (farthest point sampling, fixed-radius neighborhoods, shared MLPs,
local max pooling), a global max feature fused with an embedded physiological
state vector, and two inverse-distance-squared interpolation stages back to
the full cloud.  The head emits three linear channels (normalized pressure,
velocity, wall shear stress) and a sigmoid channel for FFR.

The cloud is canonicalized by lexicographic sort on coordinates before any
sampling and restored afterwards, so outputs are exactly equivariant to
input permutation (coincident points with differing features are the only
exception).  Training minimizes mean absolute error over all n x 4 entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, absolute, concat, index_select, matmul, relu,
                       sigmoid, tensor_max, tensor_mean, tensor_sum)
from .errors import ValidationError

OUTPUT_CHANNELS = ("pressure", "velocity", "wss", "ffr")


@dataclass(frozen=True)
class SetAbstraction:
    """One sampling + grouping + pooling stage."""

    n_centers: int
    radius: float
    max_k: int
    width: int

    def __post_init__(self):
        if min(self.n_centers, self.max_k, self.width) < 1 or self.radius <= 0:
            raise ValidationError("set abstraction sizes must be positive")


@dataclass(frozen=True)
class PnConfig:
    """Architecture sizes for the point network."""

    in_features: int = 30
    sa1: SetAbstraction = SetAbstraction(512, 0.25, 16, 64)
    sa2: SetAbstraction = SetAbstraction(128, 0.75, 16, 128)
    context: int = 128
    head: int = 128
    conditioning: int = 3

    def __post_init__(self):
        if min(self.in_features, self.context, self.head, self.conditioning) < 1:
            raise ValidationError("point network sizes must be positive")

    @classmethod
    def debug(cls):
        # radii sized for unit-scale test clouds so neighborhoods are
        # populated rather than degenerate singletons
        return cls(in_features=4,
                   sa1=SetAbstraction(16, 1.5, 4, 8),
                   sa2=SetAbstraction(8, 3.0, 4, 16),
                   context=16, head=16)


def conditioning_vector(physio):
    """Physiological state as O(1) network inputs.

    Entries: inlet pressure in units of 100 mmHg, microvascular resistance
    scaled by 1e-5, and a hyperemia flag.
    """
    flag = 1.0 if physio.regime == "hyperemic" else 0.0
    return np.array([physio.p_inlet_mmhg / 100.0,
                     physio.r_micro * 1e-5, flag], dtype=np.float64)


def canonical_order(points):
    """Lexicographic order on (x, y, z); stable for coincident points."""
    pts = np.asarray(points)
    return np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))


def farthest_point_indices(points, k, start=0):
    """Greedy farthest-point subset of size min(k, n), beginning at `start`.

    Each step picks the point maximizing the distance to the chosen set;
    ties resolve to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValidationError("cannot sample from an empty point set")
    k = min(k, n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    norms = np.einsum("ij,ij->i", pts, pts)
    d = norms - 2.0 * (pts @ pts[start]) + norms[start]
    for i in range(1, k):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        cand = norms - 2.0 * (pts @ pts[nxt]) + norms[nxt]
        np.minimum(d, cand, out=d)
    return chosen


def ball_query(points, center_indices, radius, max_k):
    """Neighbor table [m, max_k] of cloud indices within `radius` of centers.

    Candidates order by (distance, index); short lists pad by repeating the
    nearest neighbor, and a center with an empty ball falls back to itself.
    """
    pts = np.asarray(points, dtype=np.float64)
    centers = pts[center_indices]
    with np.errstate(invalid="ignore"):
        d2 = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        masked = np.where(d2 <= radius * radius, d2, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")[:, :max_k]
    valid = np.take_along_axis(masked, order, axis=1) < np.inf
    idx = np.where(valid, order, order[:, :1])
    if idx.shape[1] < max_k:
        pad = np.repeat(idx[:, :1], max_k - idx.shape[1], axis=1)
        idx = np.concatenate([idx, pad], axis=1)
    empty = ~valid[:, 0]
    if empty.any():
        idx[empty] = np.asarray(center_indices)[empty, None]
    return idx


def three_nn_weights(coarse_points, fine_points, eps=1e-10):
    """Inverse-distance-squared weights of the 3 nearest coarse points.

    Returns (indices [m, k], weights [m, k]) with k = min(3, n_coarse) and
    rows summing to one; a fine point coinciding with a coarse point gets
    essentially all weight there.
    """
    coarse = np.asarray(coarse_points, dtype=np.float64)
    fine = np.asarray(fine_points, dtype=np.float64)
    k = min(3, len(coarse))
    d2 = ((fine[:, None, :] - coarse[None, :, :]) ** 2).sum(axis=2)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    near = np.take_along_axis(d2, idx, axis=1)
    w = 1.0 / (near + eps)
    return idx, w / w.sum(axis=1, keepdims=True)


def _linear_init(rng, c_in, c_out, dtype):
    w = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
    return Tensor(w.astype(dtype), requires_grad=True)


def init_pn_params(config, rng, dtype=np.float32):
    """He-initialized weights for every MLP in the network.

    The output heads start near zero weight.  The field head therefore
    predicts (0, 0, 0), the mean of the z-scored targets; the sigmoid
    FFR head gets a +2 bias so it opens at sigmoid(2) ~ 0.88, near the
    FFR prior, instead of 0.5 deep below the healthy-vessel plateau.
    """
    params = {}

    def mlp(name, widths, final_std=None, final_bias=0.0):
        for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:])):
            if final_std is not None and i == len(widths) - 2:
                w = rng.normal(0.0, final_std, size=(c_in, c_out))
                params[f"{name}.{i}.w"] = Tensor(w.astype(dtype),
                                                 requires_grad=True)
                b = np.full(c_out, final_bias, dtype=dtype)
            else:
                params[f"{name}.{i}.w"] = _linear_init(rng, c_in, c_out, dtype)
                b = np.zeros(c_out, dtype=dtype)
            params[f"{name}.{i}.b"] = Tensor(b, requires_grad=True)

    mlp("pn.sa1", (3 + config.in_features, config.sa1.width, config.sa1.width))
    mlp("pn.sa2", (3 + config.sa1.width, config.sa2.width, config.sa2.width))
    mlp("pn.embed", (config.conditioning, config.context // 2, config.sa2.width))
    mlp("pn.fuse", (2 * config.sa2.width, config.context))
    mlp("pn.fp2", (config.sa2.width + config.sa1.width, config.sa1.width))
    mlp("pn.fp1", (config.sa1.width + config.in_features, config.head))
    mlp("pn.trunk", (config.head + config.context, config.head))
    mlp("pn.fields", (config.head, 3), final_std=0.01)
    mlp("pn.ffr", (config.head, 1), final_std=0.01, final_bias=2.0)
    return params


def _mlp(params, name, x):
    i = 0
    while f"{name}.{i}.w" in params:
        x = matmul(x, params[f"{name}.{i}.w"]) + params[f"{name}.{i}.b"]
        if f"{name}.{i + 1}.w" in params:
            x = relu(x)
        i += 1
    return x


def _mlp_relu(params, name, x):
    return relu(_mlp(params, name, x))


def _group_pool(params, name, points, feats, center_idx, nbr_idx, dtype):
    """Shared MLP over grouped neighborhoods followed by local max pooling."""
    m, k = nbr_idx.shape
    rel = points[nbr_idx] - points[center_idx][:, None, :]
    rel_t = Tensor(rel.reshape(m * k, 3).astype(dtype))
    gathered = index_select(feats, nbr_idx.reshape(-1))
    grouped = concat([rel_t, gathered], axis=1)
    out = _mlp_relu(params, name, grouped)
    return tensor_max(out.reshape(m, k, -1), axis=1)


def _interpolate(coarse_points, coarse_feats, fine_points, dtype):
    idx, w = three_nn_weights(coarse_points, fine_points)
    m, k = idx.shape
    gathered = index_select(coarse_feats, idx.reshape(-1)).reshape(m, k, -1)
    weighted = gathered * Tensor(w[:, :, None].astype(dtype))
    return tensor_sum(weighted, axis=1)


def pn_forward(params, config, points, features, conditioning):
    """Per-point output (n, 4): three linear channels and a sigmoid channel.

    `points` is an (n, 3) coordinate array (data, not differentiated),
    `features` an (n, in_features) Tensor, and `conditioning` the
    physiological state vector shared by the whole cloud.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be (n, 3), got {pts.shape}")
    if features.shape[0] != len(pts) or features.shape[1] != config.in_features:
        raise ValidationError(
            f"features must be (n, {config.in_features}), got {features.shape}")
    cond = np.asarray(conditioning, dtype=np.float64).reshape(-1)
    if len(cond) != config.conditioning:
        raise ValidationError(
            f"conditioning must have {config.conditioning} entries, got {len(cond)}")
    dtype = features.dtype

    order = canonical_order(pts)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    pts_c = pts[order]
    feats_c = index_select(features, order)

    sa1_idx = farthest_point_indices(pts_c, config.sa1.n_centers)
    nbr1 = ball_query(pts_c, sa1_idx, config.sa1.radius, config.sa1.max_k)
    f_sa1 = _group_pool(params, "pn.sa1", pts_c, feats_c, sa1_idx, nbr1, dtype)
    p_sa1 = pts_c[sa1_idx]

    sa2_local = farthest_point_indices(p_sa1, config.sa2.n_centers)
    nbr2 = ball_query(p_sa1, sa2_local, config.sa2.radius, config.sa2.max_k)
    f_sa2 = _group_pool(params, "pn.sa2", p_sa1, f_sa1, sa2_local, nbr2, dtype)
    p_sa2 = p_sa1[sa2_local]

    global_feat = tensor_max(f_sa2, axis=0, keepdims=True)
    embedded = _mlp_relu(params, "pn.embed", Tensor(cond[None].astype(dtype)))
    context = _mlp_relu(params, "pn.fuse", concat([global_feat, embedded], axis=1))

    up2 = _interpolate(p_sa2, f_sa2, p_sa1, dtype)
    f_mid = _mlp_relu(params, "pn.fp2", concat([up2, f_sa1], axis=1))
    up1 = _interpolate(p_sa1, f_mid, pts_c, dtype)
    f_full = _mlp_relu(params, "pn.fp1", concat([up1, feats_c], axis=1))

    ones = Tensor(np.ones((len(pts_c), 1), dtype=dtype))
    tiled = matmul(ones, context)
    trunk = _mlp_relu(params, "pn.trunk", concat([f_full, tiled], axis=1))
    fields = _mlp(params, "pn.fields", trunk)
    ffr = sigmoid(_mlp(params, "pn.ffr", trunk))
    out_c = concat([fields, ffr], axis=1)
    return index_select(out_c, inverse)


def mae_loss(pred, target):
    """Mean absolute error over every entry of the (n, 4) predictions."""
    t = np.asarray(target)
    if t.shape != tuple(pred.shape):
        raise ValidationError(f"target shape {t.shape} != prediction {tuple(pred.shape)}")
    return tensor_mean(absolute(pred - Tensor(t.astype(pred.dtype))))
