"""Vessel geometry: profiles, generators, surface sampling, serialisation."""

import json

import numpy as np
import pytest

from coroflow import geometry as geo
from coroflow.errors import DomainError, TopologyError, ValidationError


def mid_stenosis(degree=0.5):
    return geo.StenosisSpec(start_s=0.9, length=0.3, degree=degree)


class TestRadiusProfile:
    def test_healthy_segment_keeps_base_radius(self):
        tree = geo.make_idealized_lad(mid_stenosis())
        lad = tree.branch("LAD")
        assert lad.radius_at(0.2) == pytest.approx(geo.IDEALIZED_RADIUS, abs=1e-12)
        assert lad.radius_at(1.8) == pytest.approx(geo.IDEALIZED_RADIUS, abs=1e-12)

    def test_midpoint_reaches_nominal_degree(self):
        """Radius at the stenosis midpoint is base * (1 - degree)."""
        lad = geo.make_idealized_lad(mid_stenosis(0.6)).branch("LAD")
        assert lad.radius_at(0.9 + 0.15) == pytest.approx(0.4 * geo.IDEALIZED_RADIUS, rel=1e-12)

    def test_diameter_reduction_definition(self):
        """DS = 1 - r_sten / r_base holds at the throat."""
        lad = geo.make_idealized_lad(mid_stenosis(0.55)).branch("LAD")
        throat = lad.radius_at(1.05)
        base = lad.base_radius_at(1.05)
        assert 1.0 - throat / base == pytest.approx(0.55, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_profile_is_continuous(self, seed):
        """No jumps at stenosis boundaries: adjacent samples stay close."""
        rng = np.random.default_rng(seed)
        st = geo.StenosisSpec(float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.2, 0.4)),
                              float(rng.uniform(0.5, 0.7)))
        lad = geo.make_idealized_lad(st).branch("LAD")
        s = np.linspace(0.0, lad.length, 4001)
        r = lad.radius_at(s)
        assert np.max(np.abs(np.diff(r))) < 2e-3
        assert np.all(r > 0.0)

    def test_overlapping_stenoses_compose_multiplicatively(self):
        a = geo.StenosisSpec(0.8, 0.4, 0.5)
        b = geo.StenosisSpec(1.0, 0.4, 0.5)
        lad = geo.make_idealized_lad(a, permissive=True).branch("LAD")
        lad.stenoses.append(b)
        expected = (lad.base_radius_at(1.1) * lad.stenosis_factor(np.array(1.1)))
        assert lad.radius_at(1.1) == pytest.approx(float(expected))
        # at s=1.1: first dip at 3/4 phase, second at 1/4 phase, both 0.75
        dip_a = 1.0 - 0.5 * 0.5 * (1.0 - np.cos(2 * np.pi * 0.3 / 0.4))
        dip_b = 1.0 - 0.5 * 0.5 * (1.0 - np.cos(2 * np.pi * 0.1 / 0.4))
        assert lad.stenosis_factor(np.array(1.1)) == pytest.approx(dip_a * dip_b)

    def test_arclength_outside_branch_rejected(self):
        lad = geo.make_idealized_lad(mid_stenosis()).branch("LAD")
        with pytest.raises(DomainError):
            lad.radius_at(2.5)
        with pytest.raises(DomainError):
            lad.radius_at(-0.5)


class TestIdealizedValidation:
    def test_out_of_range_start_rejected(self):
        with pytest.raises(ValidationError, match="start"):
            geo.make_idealized_lad(geo.StenosisSpec(0.2, 0.3, 0.6))

    def test_out_of_range_degree_rejected(self):
        with pytest.raises(ValidationError, match="degree"):
            geo.make_idealized_lad(geo.StenosisSpec(1.0, 0.3, 0.3))

    def test_permissive_allows_off_range_but_not_overhang(self):
        geo.make_idealized_lad(geo.StenosisSpec(0.2, 0.3, 0.3), permissive=True)
        with pytest.raises(ValidationError, match="outside the branch"):
            geo.make_idealized_lad(geo.StenosisSpec(1.9, 0.3, 0.6), permissive=True)


class TestSyntheticTrees:
    def test_topology_template(self):
        tree = geo.make_synthetic_tree(0)
        ids = {b.branch_id for b in tree.branches}
        assert ids == {"stem", "LAD", "LCx", "RCA", "LAD_sub", "LCx_sub", "RCA_sub"}
        assert tree.branch("LAD").parent == "stem"
        assert tree.branch("LAD_sub").parent == "LAD"
        assert {b.branch_id for b in tree.leaves()} == {"LAD_sub", "LCx_sub", "RCA_sub"}

    def test_deterministic_for_seed(self):
        a = geo.make_synthetic_tree(42)
        b = geo.make_synthetic_tree(42)
        for ba, bb in zip(a.branches, b.branches):
            assert np.array_equal(ba.points, bb.points)
            assert ba.stenoses == bb.stenoses

    def test_different_seeds_differ(self):
        a = geo.make_synthetic_tree(1)
        b = geo.make_synthetic_tree(2)
        assert not np.array_equal(a.branch("LAD").points, b.branch("LAD").points)

    @pytest.mark.parametrize("seed", range(0, 100, 7))
    def test_children_start_on_parents(self, seed):
        tree = geo.make_synthetic_tree(seed)
        tree.validate()  # includes the attachment distance check

    def test_stenosis_counts_stay_in_choice_set(self):
        """100-seed sweep: per-main-branch counts only ever 0, 1 or 2."""
        for seed in range(100):
            tree = geo.make_synthetic_tree(seed)
            for name in geo.MAIN_BRANCHES:
                assert len(tree.branch(name).stenoses) in {0, 1, 2}
            for name in ("stem", "LAD_sub", "LCx_sub", "RCA_sub"):
                assert tree.branch(name).stenoses == []

    def test_mean_stenosis_count_is_one(self):
        """1000 trees: empirical mean count per main branch within 1.0 +/- 0.1."""
        counts = []
        for seed in range(1000):
            tree = geo.add_random_stenoses(_CACHED_BASE, seed)
            counts.append([len(tree.branch(n).stenoses) for n in geo.MAIN_BRANCHES])
        means = np.mean(counts, axis=0)
        assert np.all(np.abs(means - 1.0) <= 0.1)

    def test_variants_share_base_geometry(self):
        base = geo.sample_base_tree(7)
        v1 = geo.add_random_stenoses(base, 100)
        v2 = geo.add_random_stenoses(base, 101)
        assert np.array_equal(v1.branch("LAD").points, v2.branch("LAD").points)
        assert v1.branch("LAD").stenoses != v2.branch("LAD").stenoses or \
            v1.branch("LCx").stenoses != v2.branch("LCx").stenoses or \
            v1.branch("RCA").stenoses != v2.branch("RCA").stenoses


_CACHED_BASE = geo.sample_base_tree(0)


class TestTopologyValidation:
    def test_detached_child_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
        child_pts = pts + np.array([0.0, 0.5, 0.0])
        with pytest.raises(TopologyError, match="off its parent"):
            geo.VesselTree(
                [geo.Branch("a", None, pts, np.full(10, 0.1)),
                 geo.Branch("b", "a", child_pts, np.full(10, 0.08))],
                root="a")

    def test_unknown_parent_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)])
        with pytest.raises(TopologyError, match="unknown parent"):
            geo.VesselTree(
                [geo.Branch("a", None, pts, np.full(5, 0.1)),
                 geo.Branch("b", "ghost", pts.copy(), np.full(5, 0.1))],
                root="a")

    def test_nonpositive_radius_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)])
        with pytest.raises(ValidationError, match="positive"):
            geo.Branch("a", None, pts, np.array([0.1, 0.1, 0.0, 0.1, 0.1]))


class TestSurfacePoints:
    def test_point_count_and_determinism(self):
        tree = geo.make_idealized_lad(mid_stenosis())
        a = geo.surface_points(tree, 500, seed=3)
        b = geo.surface_points(tree, 500, seed=3)
        assert len(a) == 500
        assert np.array_equal(a.positions, b.positions)
        assert not np.array_equal(a.positions, geo.surface_points(tree, 500, seed=4).positions)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_points_lie_on_the_tube(self, seed):
        """Distance from the interpolated centerline equals radius_at(s)."""
        tree = geo.make_synthetic_tree(seed)
        pts = geo.surface_points(tree, 800, seed=9)
        for bi, b in enumerate(tree.branches):
            pick = pts.branch_index == bi
            if not pick.any():
                continue
            centers = b.point_at(pts.s[pick])
            dist = np.linalg.norm(pts.positions[pick] - centers, axis=1)
            np.testing.assert_allclose(dist, b.radius_at(pts.s[pick]), atol=1e-9)

    def test_normals_are_unit_and_outward(self):
        tree = geo.make_idealized_lad(mid_stenosis())
        pts = geo.surface_points(tree, 400, seed=1)
        norms = np.linalg.norm(pts.normals, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        lad = tree.branch("LAD")
        centers = lad.point_at(pts.s)
        outward = np.einsum("ij,ij->i", pts.normals, pts.positions - centers)
        assert np.all(outward > 0.0)

    def test_area_weighting_prefers_wide_sections(self):
        """A strongly tapered tube collects more samples on its wide half."""
        s = np.linspace(0.0, 2.0, 101)
        pts = np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
        radius = np.linspace(0.3, 0.05, 101)
        tree = geo.VesselTree([geo.Branch("t", None, pts, radius)], root="t")
        sp = geo.surface_points(tree, 4000, seed=0)
        wide = np.sum(sp.s < 1.0)
        assert wide > 2400


class TestSerialisation:
    def test_round_trip_is_lossless(self, tmp_path):
        tree = geo.make_synthetic_tree(5)
        path = tmp_path / "tree.json"
        geo.save_tree(path, tree)
        loaded = geo.load_tree(path)
        assert loaded.root == tree.root
        for a, b in zip(tree.branches, loaded.branches):
            assert a.branch_id == b.branch_id
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.base_radius, b.base_radius)
            assert a.stenoses == b.stenoses

    def test_units_are_explicit(self):
        doc = geo.tree_to_json(geo.make_idealized_lad(mid_stenosis()))
        assert doc["units"] == "cm"
        assert "centerline_cm" in doc["branches"][0]
        assert "radius_cm" in doc["branches"][0]

    def test_foreign_document_rejected(self):
        with pytest.raises(ValidationError):
            geo.tree_from_json({"format": "something-else"})

    def test_save_is_deterministic(self, tmp_path):
        tree = geo.make_synthetic_tree(11)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        geo.save_tree(p1, tree)
        geo.save_tree(p2, geo.make_synthetic_tree(11))
        assert p1.read_bytes() == p2.read_bytes()

    def test_json_is_valid_json(self, tmp_path):
        path = tmp_path / "t.json"
        geo.save_tree(path, geo.make_idealized_lad(mid_stenosis()))
        json.loads(path.read_text())
