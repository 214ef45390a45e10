"""Graph-convolutional mesh deformation of icosphere surfaces.

A patch's lumen surface is modelled by deforming an icosphere initialized as
an ellipsoid around the predicted mask.  Three deformation blocks run graph
convolutions h' = W0 h + W1 mean_nbr(h) + b over the mesh, emit per-vertex
position offsets from zero-initialized linear layers (so the mesh starts
unchanged), and unpool between blocks by edge-midpoint subdivision: 162 to
642 to 2562 vertices.  Per-vertex inputs are features sampled from the
segmentation grids at the current positions plus the normalized positions
themselves; position dependence enters as data, not through the tape.

The training loss combines bidirectional squared chamfer distance to target
surface points with normal-consistency, edge-length, and Laplacian
smoothness regularizers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import (Tensor, concat, index_select, matmul, relu,
                       square, tensor_mean, tensor_sum)
from .errors import ValidationError

CHAMFER_WEIGHT = 1.0
NORMAL_WEIGHT = 1.6e-4
EDGE_WEIGHT = 0.1
LAPLACIAN_WEIGHT = 0.3

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
])

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def mesh_edges(faces):
    """Unique undirected edges (i < j), sorted lexicographically."""
    f = np.asarray(faces)
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def subdivide_faces(faces, n_verts):
    """Faces after one midpoint subdivision; midpoint of edge rank k gets
    index n_verts + k."""
    faces = np.asarray(faces)
    edges = mesh_edges(faces)
    keys = edges[:, 0] * (n_verts + 1) + edges[:, 1]

    def rank_of(u, v):
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        return n_verts + np.searchsorted(keys, lo * (n_verts + 1) + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = rank_of(a, b), rank_of(b, c), rank_of(c, a)
    out = np.empty((len(faces), 4, 3), dtype=np.int64)
    out[:, 0] = np.stack([a, ab, ca], axis=1)
    out[:, 1] = np.stack([b, bc, ab], axis=1)
    out[:, 2] = np.stack([c, ca, bc], axis=1)
    out[:, 3] = np.stack([ab, bc, ca], axis=1)
    return out.reshape(-1, 3), edges


def icosphere(level):
    """Unit icosphere: (vertices, faces) after `level` subdivisions.

    Counts follow V = 10*4^level + 2: 12, 42, 162, 642, 2562, ...
    """
    if level < 0:
        raise ValidationError("subdivision level must be nonnegative")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES
    for _ in range(level):
        new_faces, edges = subdivide_faces(faces, len(verts))
        mids = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        verts = np.concatenate([verts, mids])
        faces = new_faces
    return verts, faces


def vertex_neighbors(faces, n_verts):
    """Padded neighbor table: (indices [n, k_max], mask [n, k_max], degree [n]).

    Neighbor lists are ascending; padding repeats index 0 but is masked out.
    """
    edges = mesh_edges(faces)
    directed = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    src = directed[order, 0]
    dst = directed[order, 1]
    degree = np.bincount(src, minlength=n_verts)
    if len(degree) != n_verts or degree.min() == 0:
        raise ValidationError("mesh has isolated vertices")
    k_max = int(degree.max())
    starts = np.concatenate([[0], np.cumsum(degree)[:-1]])
    pos = np.arange(len(src)) - np.repeat(starts, degree)
    idx = np.zeros((n_verts, k_max), dtype=np.int64)
    mask = np.zeros((n_verts, k_max))
    idx[src, pos] = dst
    mask[src, pos] = 1.0
    return idx, mask, degree.astype(np.int64)


def make_topology(faces, n_verts):
    """Connectivity tables used by graph convolutions and the mesh loss.

    `nbr_ghost` pads each neighbor list to the max degree with index
    `n_verts`, pointing at an implicit all-zero ghost row; dividing the
    padded sum by the true degree then gives exact neighbor means without
    mask multiplies.
    """
    faces = np.asarray(faces)
    idx, mask, degree = vertex_neighbors(faces, n_verts)
    edges = mesh_edges(faces)
    return {
        "faces": faces,
        "edges": edges,
        "directed": np.concatenate([edges, edges[:, ::-1]]),
        "nbr_idx": idx,
        "nbr_mask": mask,
        "nbr_ghost": np.where(mask > 0, idx, n_verts),
        "degree": degree,
    }


class _LevelCache:
    """Combinatorics of each icosphere level, built once."""

    def __init__(self):
        self._store = {}

    def get(self, level):
        if level not in self._store:
            verts, faces = icosphere(level)
            topo = make_topology(faces, len(verts))
            topo["verts"] = verts
            self._store[level] = topo
        return self._store[level]


_LEVELS = _LevelCache()


def level_topology(level):
    """Cached faces/edges/neighbor tables for one icosphere level."""
    return _LEVELS.get(level)


def neighbor_mean(values, topo):
    """Mean over each vertex's neighbors of a [n, C] Tensor."""
    n, k = topo["nbr_ghost"].shape
    ghost = Tensor(np.zeros((1, values.shape[1]), dtype=values.dtype))
    ext = concat([values, ghost], axis=0)
    gathered = index_select(ext, topo["nbr_ghost"].reshape(-1))
    gathered = gathered.reshape(n, k, -1)
    return tensor_sum(gathered, axis=1) / topo["degree"][:, None].astype(values.dtype)


def unpool(verts, features, faces, edges=None, new_faces=None):
    """Edge-midpoint unpooling: midpoints extend positions and features.

    New vertex positions are edge midpoints and new features are endpoint
    means; faces split 1 to 4.  Works on Tensors so gradients flow back to
    the coarse level.  `edges`/`new_faces` may be supplied from a cached
    topology to skip recomputing the subdivision.
    """
    n = verts.shape[0]
    if edges is None or new_faces is None:
        new_faces, edges = subdivide_faces(faces, n)
    va = index_select(verts, edges[:, 0])
    vb = index_select(verts, edges[:, 1])
    verts_out = concat([verts, (va + vb) * 0.5], axis=0)
    feats_out = None
    if features is not None:
        fa = index_select(features, edges[:, 0])
        fb = index_select(features, edges[:, 1])
        feats_out = concat([features, (fa + fb) * 0.5], axis=0)
    return verts_out, feats_out, new_faces


def ellipsoid_init(mask, min_half=1.5):
    """Ellipsoid center and half-extents (voxel units) from a binary mask.

    Empty masks fall back to the patch center with quarter-size extents.
    """
    mask = np.asarray(mask)
    coords = np.argwhere(mask > 0)
    if len(coords) == 0:
        center = (np.array(mask.shape, dtype=np.float64) - 1.0) / 2.0
        half = np.array(mask.shape, dtype=np.float64) / 4.0
        return center, half
    center = coords.mean(axis=0)
    half = np.maximum(coords.std(axis=0) * 1.5, min_half)
    return center, half


@dataclass(frozen=True)
class MdConfig:
    """Sizes for the mesh deformation network."""

    in_features: int = 24     # sampled feature width per vertex
    hidden: int = 32
    blocks: int = 3
    layers: int = 3
    base_level: int = 2       # 162 vertices; two unpools reach 2562
    patch_size: int = 32

    def __post_init__(self):
        if min(self.in_features, self.hidden, self.blocks, self.layers,
               self.patch_size) < 1 or self.base_level < 0:
            raise ValidationError("mesh deformation config sizes must be positive")

    def level_of_block(self, block):
        return self.base_level + block

    def block_input_width(self, block):
        extra = self.hidden if block > 0 else 0
        return self.in_features + 3 + extra

    @classmethod
    def debug(cls):
        """Coarse variant for finite-difference checks."""
        return cls(in_features=4, hidden=6, blocks=2, layers=2, base_level=0,
                   patch_size=8)


def init_md_params(config, rng, dtype=np.float32):
    """GCN weights (He) and zero offset layers, keyed by block and layer."""
    params = {}
    for b in range(config.blocks):
        width_in = config.block_input_width(b)
        for l in range(config.layers):
            c_in = width_in if l == 0 else config.hidden
            for tag in ("w0", "w1"):
                w = rng.normal(0.0, np.sqrt(2.0 / (2 * c_in)),
                               size=(c_in, config.hidden))
                params[f"md.block{b}.gcn{l}.{tag}"] = Tensor(w.astype(dtype),
                                                             requires_grad=True)
            params[f"md.block{b}.gcn{l}.b"] = Tensor(
                np.zeros(config.hidden, dtype=dtype), requires_grad=True)
        params[f"md.block{b}.offset.w"] = Tensor(
            np.zeros((config.hidden, 3), dtype=dtype), requires_grad=True)
        params[f"md.block{b}.offset.b"] = Tensor(np.zeros(3, dtype=dtype),
                                                 requires_grad=True)
    return params


def _gcn(params, key, h, topo):
    mixed = matmul(h, params[f"{key}.w0"])
    nbr = matmul(neighbor_mean(h, topo), params[f"{key}.w1"])
    return relu(mixed + nbr + params[f"{key}.b"])


def md_forward(params, config, sampler, center, half_extents):
    """Deform an ellipsoid-initialized icosphere through all blocks.

    `sampler` maps an (n, 3) position array (patch voxel coordinates) to a
    Tensor of per-vertex features; gradients flow through the features, while
    positions enter as plain data.  Returns a list of (vertices, faces) per
    block, coarse to fine; with zero-initialized offsets every stage
    reproduces the (unpooled) ellipsoid exactly.
    """
    dtype = params["md.block0.offset.w"].dtype
    topo = level_topology(config.base_level)
    unit = topo["verts"]
    start = np.asarray(center, dtype=np.float64) + unit * np.asarray(half_extents)
    verts = Tensor(start.astype(dtype))
    faces = topo["faces"]
    hidden = None
    stages = []
    for b in range(config.blocks):
        feats = sampler(verts.data)
        pos = Tensor((verts.data / config.patch_size).astype(dtype))
        parts = [feats, pos] if hidden is None else [feats, pos, hidden]
        h = concat(parts, axis=1)
        for l in range(config.layers):
            h = _gcn(params, f"md.block{b}.gcn{l}", h, topo)
        offset = matmul(h, params[f"md.block{b}.offset.w"]) + params[f"md.block{b}.offset.b"]
        verts = verts + offset
        stages.append((verts, faces))
        if b < config.blocks - 1:
            next_topo = level_topology(config.level_of_block(b + 1))
            verts, hidden, _ = unpool(verts, h, faces, edges=topo["edges"],
                                      new_faces=next_topo["faces"])
            topo = next_topo
            faces = topo["faces"]
    return stages


def mesh_loss(verts, target_points, target_normals=None, faces=None,
              topo=None, w_chamfer=CHAMFER_WEIGHT, w_normal=NORMAL_WEIGHT,
              w_edge=EDGE_WEIGHT, w_laplacian=LAPLACIAN_WEIGHT):
    """Chamfer + regularizer surface loss against a target point set.

    Chamfer is the sum of both directed mean squared nearest-neighbor
    distances, with assignments held fixed from a KD-tree query.  The normal
    term penalizes components of mesh edges along the target normal at each
    vertex's nearest target point (skipped when `target_normals` is None);
    edge and Laplacian terms regularize lengths and local smoothness
    (skipped when connectivity is absent).  Pass `topo` from
    `level_topology` to reuse cached connectivity, or `faces` to derive it
    here.  Returns (total, parts) with unweighted part values.
    """
    q = np.asarray(target_points, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3 or len(q) == 0:
        raise ValidationError("target points must be a nonempty (m, 3) array")
    p = verts.data
    idx_vq = cKDTree(q).query(p)[1]
    idx_qp = cKDTree(p).query(q)[1]

    diff_vq = verts - Tensor(q[idx_vq].astype(verts.dtype))
    term_fwd = tensor_mean(tensor_sum(square(diff_vq), axis=1))
    sel = index_select(verts, idx_qp)
    diff_qp = sel - Tensor(q.astype(verts.dtype))
    term_bwd = tensor_mean(tensor_sum(square(diff_qp), axis=1))
    chamfer = term_fwd + term_bwd
    total = chamfer * w_chamfer
    parts = {"chamfer": float(chamfer.data)}

    if topo is None and faces is not None:
        topo = make_topology(faces, verts.shape[0])
    if topo is not None:
        edges = topo["edges"]
        directed = topo["directed"]
        if target_normals is not None:
            normals = np.asarray(target_normals, dtype=np.float64)
            if normals.shape != q.shape:
                raise ValidationError("target normals must match target points")
            d = index_select(verts, directed[:, 0]) - index_select(verts, directed[:, 1])
            n_at = Tensor(normals[idx_vq[directed[:, 0]]].astype(verts.dtype))
            normal_term = tensor_mean(square(tensor_sum(d * n_at, axis=1)))
            parts["normal"] = float(normal_term.data)
            total = total + normal_term * w_normal
        e_vec = index_select(verts, edges[:, 0]) - index_select(verts, edges[:, 1])
        edge_term = tensor_mean(tensor_sum(square(e_vec), axis=1))
        parts["edge"] = float(edge_term.data)
        total = total + edge_term * w_edge
        lap = verts - neighbor_mean(verts, topo)
        lap_term = tensor_mean(tensor_sum(square(lap), axis=1))
        parts["laplacian"] = float(lap_term.data)
        total = total + lap_term * w_laplacian
    return total, parts


def write_off(path, verts, faces):
    """Plain OFF export of a triangle mesh."""
    verts = np.asarray(verts)
    faces = np.asarray(faces)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(verts)} {len(faces)} 0\n")
        for v in verts:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in faces:
            fh.write(f"3 {int(f[0])} {int(f[1])} {int(f[2])}\n")


def read_off(path):
    """Parse a mesh written by `write_off`."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    if tokens[0] != "OFF":
        raise ValidationError(f"{path}: not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    cursor = 4
    verts = np.array([float(t) for t in tokens[cursor:cursor + 3 * nv]]).reshape(nv, 3)
    cursor += 3 * nv
    faces = []
    for _ in range(nf):
        if tokens[cursor] != "3":
            raise ValidationError(f"{path}: only triangle faces are supported")
        faces.append([int(tokens[cursor + 1]), int(tokens[cursor + 2]),
                      int(tokens[cursor + 3])])
        cursor += 4
    return verts, np.array(faces, dtype=np.int64)
