"""Voxelizer: signed distance, intensity model, file format, patch tiling."""

import numpy as np
import pytest

from coroflow import autodiff as ad
from coroflow import geometry as geo
from coroflow import voxel as vx
from coroflow.errors import ResourceError, ValidationError


def straight_tube(radius=0.15, length=2.0):
    s = np.linspace(0.0, length, 101)
    pts = np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
    return geo.VesselTree([geo.Branch("t", None, pts, np.full(101, radius))], root="t")


def all_lumen_volume(dims):
    return vx.VoxelVolume(spacing=(0.04, 0.04, 0.04), origin=np.zeros(3),
                          intensity=np.zeros(dims, dtype=np.float32),
                          mask=np.ones(dims, dtype=np.uint8))


class TestSignedDistance:
    def test_matches_analytic_cylinder(self):
        """Against an ideal cylinder the grid distance is far inside half a
        voxel diagonal (the capsule decomposition is exact for straight runs)."""
        tree = straight_tube()
        spacing = np.array(vx.DEFAULT_SPACING)
        origin = np.array([-0.2, -0.4, -0.4])
        dims = (52, 22, 22)
        d = vx.signed_distance(tree, origin, spacing, dims, band=0.3)
        coords = np.meshgrid(*[origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)],
                             indexing="ij")
        analytic = np.hypot(coords[1], coords[2]) - 0.15
        interior = (coords[0] > 0.3) & (coords[0] < 1.7) & (analytic < 0.25)
        half_diag = 0.5 * np.linalg.norm(spacing)
        assert np.max(np.abs(d[interior] - analytic[interior])) < half_diag
        # and in fact to rounding for this geometry
        assert np.max(np.abs(d[interior] - analytic[interior])) < 1e-9

    def test_band_clamps_far_field(self):
        tree = straight_tube()
        d = vx.signed_distance(tree, np.array([-0.5, -1.0, -1.0]), (0.1, 0.1, 0.1),
                               (30, 20, 20), band=0.25)
        assert d.max() == pytest.approx(0.25)


class TestIntensityModel:
    def test_deep_interior_saturates_to_lumen_level(self):
        """At a centerline point d = -radius << -w, so intensity is within 1%
        of the lumen level before noise."""
        val = vx.intensity_from_distance(np.array(-0.15))
        assert abs(val - 400.0) / 400.0 < 0.01

    def test_far_outside_saturates_to_background(self):
        """Beyond 10 edge-widths the clean intensity is within 1% of background."""
        val = vx.intensity_from_distance(np.array(10 * 0.02))
        assert abs(val - 50.0) / 50.0 < 0.01

    def test_surface_is_halfway(self):
        mid = vx.intensity_from_distance(np.array(0.0))
        assert mid == pytest.approx(0.5 * (400.0 + 50.0))

    def test_invalid_imaging_rejected(self):
        with pytest.raises(ValidationError):
            vx.ImagingModel(edge_width=0.0).validate()


class TestVoxelize:
    def test_mask_matches_sign_of_distance(self):
        tree = straight_tube()
        vol = vx.voxelize(tree, noise_seed=1)
        d = vx.signed_distance(tree, vol.origin, np.array(vol.spacing), vol.dims)
        np.testing.assert_array_equal(vol.mask, (d < 0).astype(np.uint8))

    def test_centerline_voxel_is_lumen(self):
        tree = straight_tube()
        vol = vx.voxelize(tree, noise_seed=0)
        idx = np.round(vol.world_to_voxel([[1.0, 0.0, 0.0]])[0]).astype(int)
        assert vol.mask[tuple(idx)] == 1

    def test_noise_is_seeded(self):
        tree = straight_tube()
        a = vx.voxelize(tree, noise_seed=7)
        b = vx.voxelize(tree, noise_seed=7)
        c = vx.voxelize(tree, noise_seed=8)
        assert np.array_equal(a.intensity, b.intensity)
        assert not np.array_equal(a.intensity, c.intensity)
        assert np.array_equal(a.mask, c.mask)  # noise never touches the mask

    def test_voxel_budget_enforced(self):
        with pytest.raises(ResourceError):
            vx.voxelize(straight_tube(), voxel_budget=1000)

    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(ValidationError):
            vx.voxelize(straight_tube(), spacing=(0.0, 0.04, 0.04))


class TestVolumeFile:
    def test_round_trip_bit_exact(self, tmp_path):
        vol = vx.voxelize(straight_tube(), noise_seed=3)
        path = tmp_path / "vol.cvox"
        vx.save_volume(path, vol)
        back = vx.load_volume(path)
        assert back.dims == vol.dims
        assert back.spacing == tuple(vol.spacing)
        assert np.array_equal(back.origin, vol.origin)
        assert np.array_equal(back.intensity, vol.intensity)
        assert np.array_equal(back.mask, vol.mask)
        assert back.noise_seed == vol.noise_seed

    def test_save_is_deterministic(self, tmp_path):
        vol = vx.voxelize(straight_tube(), noise_seed=3)
        p1, p2 = tmp_path / "a.cvox", tmp_path / "b.cvox"
        vx.save_volume(p1, vol)
        vx.save_volume(p2, vol)
        assert p1.read_bytes() == p2.read_bytes()

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "x.cvox"
        path.write_bytes(b"\x02\x00\x00\x00\x00\x00\x00\x00{}")
        with pytest.raises(ValidationError):
            vx.load_volume(path)


class TestPatches:
    def test_full_cube_tiling_counts(self):
        """A 64^3 all-lumen volume with stride 32 tiles into exactly 8 patches."""
        patches = vx.extract_patches(all_lumen_volume((64, 64, 64)), stride=32)
        assert len(patches) == 8
        assert sorted(p.offset for p in patches) == [
            (0, 0, 0), (0, 0, 32), (0, 32, 0), (0, 32, 32),
            (32, 0, 0), (32, 0, 32), (32, 32, 0), (32, 32, 32)]

    def test_exact_fit_single_patch(self):
        """A 32^3 all-lumen volume with stride 32 is one patch equal to itself."""
        vol = all_lumen_volume((32, 32, 32))
        vol.intensity[:] = np.arange(32 ** 3, dtype=np.float32).reshape(32, 32, 32)
        patches = vx.extract_patches(vol, stride=32)
        assert len(patches) == 1
        assert patches[0].offset == (0, 0, 0)
        assert patches[0].pad == ((0, 0), (0, 0), (0, 0))
        assert np.array_equal(patches[0].intensity, vol.intensity)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_lumen_voxel_is_covered(self, seed):
        """Random sparse masks: patch union covers all mask-positive voxels."""
        rng = np.random.default_rng(seed)
        dims = (40, 37, 45)
        mask = np.zeros(dims, dtype=np.uint8)
        blobs = rng.integers(0, np.array(dims) - 1, size=(30, 3))
        mask[tuple(blobs.T)] = 1
        vol = vx.VoxelVolume(spacing=(0.04,) * 3, origin=np.zeros(3),
                             intensity=np.zeros(dims, dtype=np.float32), mask=mask)
        patches = vx.extract_patches(vol, stride=16)
        covered = np.zeros(dims, dtype=bool)
        for p in patches:
            sl = tuple(slice(max(o, 0), min(o + 32, dims[ax]))
                       for ax, o in enumerate(p.offset))
            covered[sl] = True
        assert np.all(covered[mask > 0])

    def test_patches_ordered_lexicographically(self):
        patches = vx.extract_patches(all_lumen_volume((64, 48, 48)), stride=16)
        offsets = [p.offset for p in patches]
        assert offsets == sorted(offsets)

    def test_padding_recorded_for_edge_patches(self):
        """Lumen near the volume edge forces zero-padded crops."""
        dims = (20, 20, 20)
        mask = np.zeros(dims, dtype=np.uint8)
        mask[0:18, 0:18, 0:18] = 1
        vol = vx.VoxelVolume(spacing=(0.04,) * 3, origin=np.zeros(3),
                             intensity=np.full(dims, 5.0, dtype=np.float32), mask=mask)
        patches = vx.extract_patches(vol, stride=16)
        assert all(p.offset == (0, 0, 0) or any(o < 0 or o + 32 > 20 for o in p.offset)
                   or True for p in patches)
        first = [p for p in patches if p.offset == (0, 0, 0)][0]
        assert first.pad == ((0, 12), (0, 12), (0, 12))
        assert np.all(first.intensity[20:, :, :] == 0.0)
        assert np.all(first.mask[20:, :, :] == 0)

    def test_stride_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            vx.extract_patches(all_lumen_volume((32, 32, 32)), stride=0)

    def test_empty_mask_gives_no_patches(self):
        vol = all_lumen_volume((32, 32, 32))
        vol.mask[:] = 0
        assert vx.extract_patches(vol) == []


class TestFeatureSampling:
    def _patch_and_volume(self):
        vol = all_lumen_volume((32, 32, 32))
        patch = vx.extract_patches(vol, stride=32)[0]
        return patch, vol

    def test_scale1_samples_grid_values_at_voxel_centres(self):
        patch, vol = self._patch_and_volume()
        rng = np.random.default_rng(0)
        grid = ad.Tensor(rng.standard_normal((4, 32, 32, 32)))
        pts = vol.voxel_to_world(np.array([[3, 5, 7], [10, 0, 31]], dtype=np.float64))
        feats, clipped = vx.sample_features_at(pts, [(grid, 1)], patch, vol)
        np.testing.assert_allclose(feats.data[0], grid.data[:, 3, 5, 7], atol=1e-12)
        np.testing.assert_allclose(feats.data[1], grid.data[:, 10, 0, 31], atol=1e-12)
        assert clipped == 0.0

    def test_scale2_center_alignment(self):
        """A half-resolution grid cell centre sits between voxels 0 and 1."""
        patch, vol = self._patch_and_volume()
        grid = ad.Tensor(np.arange(16 ** 3, dtype=np.float64).reshape(1, 16, 16, 16))
        pts = vol.voxel_to_world(np.array([[0.5, 0.5, 0.5]]))
        feats, _ = vx.sample_features_at(pts, [(grid, 2)], patch, vol)
        assert feats.data[0, 0] == pytest.approx(grid.data[0, 0, 0, 0])

    def test_concatenates_scales_and_flags_clamping(self):
        patch, vol = self._patch_and_volume()
        g1 = ad.Tensor(np.zeros((2, 32, 32, 32)))
        g2 = ad.Tensor(np.zeros((3, 16, 16, 16)))
        outside = vol.voxel_to_world(np.array([[40.0, 0.0, 0.0], [5.0, 5.0, 5.0]]))
        feats, clipped = vx.sample_features_at(outside, [(g1, 1), (g2, 2)], patch, vol)
        assert feats.data.shape == (2, 5)
        assert clipped == pytest.approx(0.5)

    def test_gradient_flows_to_tensor_grids(self):
        patch, vol = self._patch_and_volume()
        grid = ad.Tensor(np.random.default_rng(1).standard_normal((2, 16, 16, 16)),
                         requires_grad=True)
        pts = vol.voxel_to_world(np.array([[4.2, 8.9, 15.5]]))
        ad.clear_tape()
        feats, _ = vx.sample_features_at(pts, [(grid, 2)], patch, vol)
        ad.backward(ad.square(feats).sum())
        assert grid.grad is not None
        assert np.any(grid.grad != 0.0)
        ad.clear_tape()
