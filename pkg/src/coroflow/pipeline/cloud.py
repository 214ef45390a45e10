"""Whole-vessel point cloud assembly from per-patch network outputs.

Each patch is segmented, a mesh is deformed to the predicted lumen, and the
mesh vertices from all patches are pooled into one cloud: vertices are
deduplicated on the voxel lattice (cell = 1 voxel) with features averaged in
overlaps, then resampled to a fixed count by farthest point sampling.

Per-point features concatenate the sampled multi-scale segmentation grids
with geometric extras: lumen probability, Euclidean distance transform,
a local-maximum distance transform (lumen radius proxy), and the position
relative to the volume origin.  Truth channels are attached afterwards by
nearest-surface-point lookup, so the same cloud serves both regimes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..autodiff import Tensor, concat, index_select, no_grad, segment_mean
from ..errors import CaseError, ValidationError
from ..meshdeform import ellipsoid_init, md_forward
from ..pointnet import farthest_point_indices
from ..segnet import SegConfig, normalize_intensity, seg_forward
from ..voxel import extract_patches, patch_world_origin, sample_features_at

EXTRA_CHANNELS = 6     # prob, edt, local-max edt, relative position (3)
EDT_SCALE = 10.0       # cm -> feature units
POSITION_SCALE = 0.2   # cm -> feature units
RADIUS_FILTER_SIZE = 5


@dataclass
class PointBatch:
    """A fixed-size cloud ready for the point network."""

    positions: np.ndarray        # (n, 3) world cm
    features: Tensor             # (n, F)
    h_t: np.ndarray              # (3,) physiological conditioning
    truth: np.ndarray = None     # (n, 4) physical units, or None at inference
    branch_ids: np.ndarray = None  # (n,) branch of the nearest surface point
    clipped_fraction: float = 0.0


@dataclass
class CloudBuild:
    """Pooled cloud plus the taped per-patch pieces for loss terms."""

    positions: np.ndarray        # (n, 3) world
    features: Tensor             # (n, F)
    clipped_fraction: float
    seg_terms: list              # (logits Tensor, labels ndarray) per grad patch
    mesh_terms: list             # (mesh stages, target points) per grad patch
    n_raw: int                   # pooled vertex count before dedup
    n_cells: int                 # after dedup, before resampling


def case_patches(vol, seg_cfg):
    """Patch tiling matched to the segmentation input size (half overlap)."""
    return extract_patches(vol, stride=max(1, seg_cfg.patch_size // 2),
                           size=seg_cfg.patch_size)


def mask_boundary_voxels(mask):
    """Indices (k, 3) of mask voxels with at least one background neighbor."""
    m = mask.astype(bool)
    if not m.any():
        return np.zeros((0, 3), dtype=np.int64)
    interior = ndimage.binary_erosion(m)
    return np.argwhere(m & ~interior)


def patch_extras(prob, mask, spacing):
    """(prob, edt, local radius) volumes for one patch, physical units."""
    edt = ndimage.distance_transform_edt(mask > 0, sampling=spacing)
    radius = ndimage.maximum_filter(edt, size=RADIUS_FILTER_SIZE)
    return prob.astype(np.float64), edt, radius


def _sample_volume(vol3d, coords_vox):
    return ndimage.map_coordinates(vol3d, coords_vox.T, order=1, mode="nearest")


def merge_vertex_cloud(positions, features, origin, spacing):
    """Deduplicate points on the voxel lattice, averaging features per cell.

    Returns (cell positions (k, 3), cell features Tensor (k, F), cell count).
    Cell order is the lexicographic order of the occupied voxel indices, so
    the merge is independent of input point order up to feature averaging.
    """
    if len(positions) == 0:
        raise CaseError("empty vertex cloud: no lumen detected")
    cells = np.floor((positions - origin) / np.asarray(spacing)).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    k = len(uniq)
    pos_sum = np.zeros((k, 3))
    np.add.at(pos_sum, inverse, positions)
    counts = np.bincount(inverse, minlength=k).astype(np.float64)
    cell_positions = pos_sum / counts[:, None]
    cell_features = segment_mean(features, inverse, k)
    return cell_positions, cell_features, k


def resample_to_count(positions, n):
    """Indices selecting exactly n points: fps when rich, cycling when short."""
    k = len(positions)
    if k >= n:
        return farthest_point_indices(positions, n)
    return np.resize(np.arange(k, dtype=np.int64), n)


def _patch_cloud(patch, vol, seg_params, seg_cfg, md_params, md_cfg, taped,
                 dtype):
    """Vertices and features contributed by one patch.

    Returns (positions (m, 3) world, features Tensor (m, F), clipped fraction,
    seg term or None, mesh verts or None).  `taped` keeps the segmentation
    and mesh on the autodiff tape so losses can flow back.
    """
    x = normalize_intensity(patch.intensity)[None, None].astype(dtype)
    if taped:
        logits, grids = seg_forward(seg_params, seg_cfg, Tensor(x))
        grids = [(g[0], s) for g, s in grids]
    else:
        with no_grad():
            logits, grids = seg_forward(seg_params, seg_cfg, Tensor(x))
            grids = [(g.data[0], s) for g, s in grids]
    e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    prob_nd = (e / e.sum(axis=1, keepdims=True))[0, 1]
    pred_mask = (prob_nd > 0.5).astype(np.uint8)

    if pred_mask.sum() == 0:
        return None, None, 0.0, (logits if taped else None), None

    center, half = ellipsoid_init(pred_mask)
    sampler = _grid_sampler(grids, patch, vol)
    if taped:
        stages = md_forward(md_params, md_cfg, sampler, center, half)
    else:
        with no_grad():
            stages = md_forward(md_params, md_cfg, sampler, center, half)
    verts = stages[-1][0]

    origin = patch_world_origin(vol, patch)
    spacing = np.asarray(vol.spacing)
    world = origin + verts.data * spacing

    grid_feats, clipped = sample_features_at(world, grids, patch, vol)
    prob, edt, radius = patch_extras(prob_nd, pred_mask, vol.spacing)
    vox = (world - origin) / spacing
    extras = np.column_stack([
        _sample_volume(prob, vox),
        _sample_volume(edt, vox) * EDT_SCALE,
        _sample_volume(radius, vox) * EDT_SCALE,
        (world - vol.origin) * POSITION_SCALE,
    ]).astype(grid_feats.dtype)
    feats = concat([grid_feats, Tensor(extras)], axis=1)
    return world, feats, clipped, (logits if taped else None), stages


def _grid_sampler(grids, patch, vol):
    origin = patch_world_origin(vol, patch)
    spacing = np.asarray(vol.spacing)

    def sampler(verts_vox):
        world = origin + np.asarray(verts_vox) * spacing
        return sample_features_at(world, grids, patch, vol)[0]

    return sampler


def build_whole_cloud(case, seg_params, seg_cfg, md_params, md_cfg, *,
                      n_points=2048, grad_patches=(), dtype=np.float32,
                      oracle_mask=False):
    """Assemble the case-wide cloud from per-patch network outputs.

    `grad_patches` lists patch indices whose segmentation and mesh stay on
    the tape (their losses train the upstream networks); all other patches
    contribute values only.  With `oracle_mask` the networks are bypassed:
    the cloud is the ground-truth mask boundary and grid features are zero.
    """
    vol = case.volume
    if oracle_mask:
        return _oracle_cloud(case, vol, n_points, dtype, seg_cfg)
    patches = case_patches(vol, seg_cfg)
    if not patches:
        raise CaseError(f"{case.case_id}: volume contains no lumen")

    grad_set = set(int(i) for i in grad_patches)
    all_pos, all_feats = [], []
    clipped = []
    seg_terms, mesh_terms = [], []
    for pi, patch in enumerate(patches):
        taped = pi in grad_set
        pos, feats, clip, logits, stages = _patch_cloud(
            patch, vol, seg_params, seg_cfg, md_params, md_cfg, taped, dtype)
        if taped and logits is not None:
            labels = patch.mask.astype(np.int64)[None]
            seg_terms.append((logits, labels))
        if pos is None:
            continue
        if taped and stages is not None:
            target = mask_boundary_voxels(patch.mask).astype(np.float64)
            if len(target):
                mesh_terms.append((stages, target))
        all_pos.append(pos)
        all_feats.append(feats)
        clipped.append(clip)

    if not all_pos:
        raise CaseError(f"{case.case_id}: no patch produced any vertices")
    positions = np.concatenate(all_pos, axis=0)
    features = concat(all_feats, axis=0) if len(all_feats) > 1 else all_feats[0]
    n_raw = len(positions)

    cell_pos, cell_feats, k = merge_vertex_cloud(positions, features,
                                                 vol.origin, vol.spacing)
    sel = resample_to_count(cell_pos, n_points)
    return CloudBuild(
        positions=cell_pos[sel],
        features=index_select(cell_feats, sel),
        clipped_fraction=float(np.mean(clipped)) if clipped else 0.0,
        seg_terms=seg_terms,
        mesh_terms=mesh_terms,
        n_raw=n_raw,
        n_cells=k,
    )


def _oracle_cloud(case, vol, n_points, dtype, seg_cfg=None):
    """Ground-truth bypass: boundary voxels of the true mask, zero grid features."""
    if seg_cfg is None:
        seg_cfg = SegConfig()
    idx = mask_boundary_voxels(vol.mask)
    if len(idx) == 0:
        raise CaseError(f"{case.case_id}: true mask is empty")
    spacing = np.asarray(vol.spacing)
    positions = vol.origin + idx.astype(np.float64) * spacing
    mask = vol.mask
    prob = mask.astype(np.float64)
    edt = ndimage.distance_transform_edt(mask > 0, sampling=vol.spacing)
    radius = ndimage.maximum_filter(edt, size=RADIUS_FILTER_SIZE)
    vox = idx.astype(np.float64)
    # grid channel count mirrors the live path so feature width is stable
    n_grid = seg_cfg.feature_channels * seg_cfg.depth
    extras = np.column_stack([
        _sample_volume(prob, vox),
        _sample_volume(edt, vox) * EDT_SCALE,
        _sample_volume(radius, vox) * EDT_SCALE,
        (positions - vol.origin) * POSITION_SCALE,
    ])
    feats = np.concatenate([np.zeros((len(idx), n_grid)), extras], axis=1)
    features = Tensor(feats.astype(dtype))
    cell_pos, cell_feats, k = merge_vertex_cloud(positions, features,
                                                 vol.origin, vol.spacing)
    sel = resample_to_count(cell_pos, n_points)
    return CloudBuild(
        positions=cell_pos[sel],
        features=index_select(cell_feats, sel),
        clipped_fraction=0.0,
        seg_terms=[],
        mesh_terms=[],
        n_raw=len(positions),
        n_cells=k,
    )


def attach_truth(positions, case, regime):
    """(truth (n, 4), branch ids (n,)) from the nearest surface samples."""
    surf_pos = case.surface_positions(regime)
    if len(surf_pos) == 0:
        raise ValidationError(f"{case.case_id}: no surface targets for {regime}")
    _, nearest = cKDTree(surf_pos).query(positions)
    truth = case.surface_truth(regime)[nearest]
    branch = np.asarray(case.surfaces[regime]["branch_id"], dtype=object)[nearest]
    return truth, branch


def cloud_to_batch(build, case, regime, h_t, with_truth=True):
    """Wrap a CloudBuild as a PointBatch for one physiological regime."""
    truth = branch = None
    if with_truth:
        truth, branch = attach_truth(build.positions, case, regime)
    return PointBatch(positions=build.positions, features=build.features,
                      h_t=h_t, truth=truth, branch_ids=branch,
                      clipped_fraction=build.clipped_fraction)
