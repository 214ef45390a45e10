"""Tests for dataset generation, cloud assembly, training, and evaluation.

Frozen hand values: NMAE of [1.5, 2, 2.5] against truth [1, 2, 3] is
(1/3)*(0.5+0+0.5)/(3-1) = 1/6; Pearson r of exactly proportional pairs
{(1,2),(2,4),(3,6)} is 1; a Bland-Altman difference vector [0.1, -0.1]
has mean 0 and sd 0.1*sqrt(2).  Training contracts (loss-weight
degeneracy, additivity, bitwise resume) are asserted exactly at 64-bit.
"""

import json
import os

import numpy as np
import pytest
from scipy.spatial import cKDTree

from coroflow.errors import TrainingError, ValidationError
from coroflow.meshdeform import MdConfig
from coroflow.oracle import PhysioParams
from coroflow.pipeline.cloud import (build_whole_cloud, cloud_to_batch,
                                     merge_vertex_cloud, resample_to_count)
from coroflow.pipeline.dataset import (DatasetConfig, generate_dataset,
                                       load_case, load_manifest, select_cases)
from coroflow.pipeline.evaluate import (bland_altman, case_point_table,
                                        classification_stats, evaluate_cases,
                                        nmae, oracle_predictor, pearson,
                                        write_results, _record_position)
from coroflow.pipeline.report import render_report
from coroflow.pipeline.training import (Models, NormStats, TrainConfig,
                                        Trainer, joint_case_loss,
                                        load_training_state)
from coroflow.pointnet import PnConfig, SetAbstraction, conditioning_vector
from coroflow.pointnet import mae_loss, pn_forward
from coroflow.segnet import SegConfig
from coroflow.autodiff import Tensor, clear_tape, no_grad

TINY = DatasetConfig(
    n_idealized=4, idealized_train=3, n_base_trees=2, variants_per_tree=2,
    tree_train_bases=1, surface_samples=500, seed=2026)

COARSE = DatasetConfig(
    n_idealized=3, idealized_train=2, n_base_trees=0, variants_per_tree=0,
    tree_train_bases=0, idealized_spacing=(0.2, 0.1, 0.1),
    surface_samples=300, seed=2026)

DEBUG_SEG = SegConfig.debug()
DEBUG_MD = MdConfig(in_features=16, hidden=6, blocks=2, layers=2,
                    base_level=0, patch_size=8)
DEBUG_PN = PnConfig(in_features=22,
                    sa1=SetAbstraction(64, 0.25, 8, 16),
                    sa2=SetAbstraction(16, 0.75, 8, 32),
                    context=16, head=16)


def debug_train_config(**kw):
    kw.setdefault("stage_a_iters", 1)
    kw.setdefault("stage_b_iters", 1)
    kw.setdefault("point_count", 256)
    kw.setdefault("kinds", ("idealized",))
    kw.setdefault("dtype", "float64")
    kw.setdefault("seed", 5)
    return TrainConfig(**kw)


def debug_trainer(data_dir, **kw):
    cfg = debug_train_config(**kw)
    models = Models.init(seed=cfg.seed, seg_cfg=DEBUG_SEG, md_cfg=DEBUG_MD,
                         pn_cfg=DEBUG_PN, dtype=cfg.np_dtype)
    return Trainer(data_dir, config=cfg, models=models)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(TINY, str(out))
    return str(out)


@pytest.fixture(scope="module")
def coarse_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("coarse_ds")
    generate_dataset(COARSE, str(out))
    return str(out)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestDatasetGeneration:
    """Manifest structure, split discipline, and regeneration determinism."""

    def test_counts_and_kinds(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        kinds = [c["kind"] for c in manifest["cases"]]
        assert kinds.count("idealized") == 4
        assert kinds.count("tree") == 4
        assert manifest["failed"] == []

    def test_split_by_base_geometry(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        train_bases = {c["base_id"] for c in manifest["cases"]
                       if c["split"] == "train"}
        test_bases = {c["base_id"] for c in manifest["cases"]
                      if c["split"] == "test"}
        assert train_bases.isdisjoint(test_bases)

    def test_inlet_ffr_is_one(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        case = load_case(tiny_dataset, manifest["cases"][0])
        for regime in ("rest", "hyperemic"):
            field = case.fields[regime]
            inlet = field.value_at(case.tree.branches[0].branch_id, 0.0, "ffr")
            assert inlet == pytest.approx(1.0, abs=1e-12)

    def test_regeneration_is_byte_identical(self, tiny_dataset, tmp_path):
        again = tmp_path / "again"
        generate_dataset(TINY, str(again))
        assert read_bytes(os.path.join(tiny_dataset, "manifest.json")) == \
            read_bytes(str(again / "manifest.json"))
        rel = "cases/ideal000/field_hyperemic.csv"
        assert read_bytes(os.path.join(tiny_dataset, rel)) == \
            read_bytes(str(again / rel))
        rel = "cases/tree001v0/volume.bin"
        assert read_bytes(os.path.join(tiny_dataset, rel)) == \
            read_bytes(str(again / rel))

    def test_worker_count_does_not_change_bytes(self, tiny_dataset, tmp_path):
        par = tmp_path / "par"
        generate_dataset(TINY, str(par), workers=4)
        assert read_bytes(os.path.join(tiny_dataset, "manifest.json")) == \
            read_bytes(str(par / "manifest.json"))
        rel = "cases/ideal002/surface_rest.csv"
        assert read_bytes(os.path.join(tiny_dataset, rel)) == \
            read_bytes(str(par / rel))

    def test_select_cases_filters(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        test_trees = select_cases(manifest, split="test", kind="tree")
        assert [c["case_id"] for c in test_trees] == ["tree001v0", "tree001v1"]


class TestVertexMerge:
    """Voxel-lattice deduplication and fixed-count resampling."""

    def test_disjoint_points_all_kept(self):
        pos = np.array([[0.05, 0.05, 0.05], [0.35, 0.05, 0.05],
                        [0.05, 0.35, 0.05]])
        feats = Tensor(np.eye(3))
        cp, cf, k = merge_vertex_cloud(pos, feats, np.zeros(3), (0.1, 0.1, 0.1))
        assert k == 3
        # output follows lexicographic voxel-cell order
        np.testing.assert_allclose(cp, pos[[0, 2, 1]])
        np.testing.assert_allclose(cf.data, np.eye(3)[[0, 2, 1]])

    def test_duplicates_merge_with_mean_features(self):
        pos = np.array([[0.02, 0.0, 0.0], [0.04, 0.0, 0.0]])
        feats = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        cp, cf, k = merge_vertex_cloud(pos, feats, np.zeros(3), (0.1, 0.1, 0.1))
        assert k == 1
        np.testing.assert_allclose(cp[0], [0.03, 0.0, 0.0])
        np.testing.assert_allclose(cf.data[0], [0.5, 0.5])

    def test_merge_order_invariant(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(0, 1, size=(40, 3))
        feats = Tensor(rng.normal(size=(40, 2)))
        perm = rng.permutation(40)
        a = merge_vertex_cloud(pos, feats, np.zeros(3), (0.25, 0.25, 0.25))
        b = merge_vertex_cloud(pos[perm], Tensor(feats.data[perm]),
                               np.zeros(3), (0.25, 0.25, 0.25))
        np.testing.assert_allclose(a[0], b[0])
        np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-12)

    def test_resample_down_and_up(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(50, 3))
        down = resample_to_count(pos, 10)
        assert len(down) == 10 and len(set(down.tolist())) == 10
        up = resample_to_count(pos[:4], 10)
        assert len(up) == 10
        assert set(up.tolist()) == {0, 1, 2, 3}


class TestOracleCloud:
    """Ground-truth-mask bypass: geometric fidelity of the merged cloud."""

    def test_cloud_hugs_true_surface(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        case = load_case(tiny_dataset, manifest["cases"][0])
        build = build_whole_cloud(case, None, None, None, None,
                                  n_points=512, oracle_mask=True)
        surf = case.surface_positions("hyperemic")
        dist, _ = cKDTree(surf).query(build.positions)
        diag = np.linalg.norm(TINY.idealized_spacing)
        assert dist.mean() < 2 * diag

    def test_truth_attachment_channels(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        case = load_case(tiny_dataset, manifest["cases"][0])
        pred_map = oracle_predictor(case, n_points=256)
        pred, batch = pred_map["hyperemic"]
        assert pred.shape == (256, 4)
        assert np.all(batch.truth[:, 3] <= 1.0 + 1e-9)
        assert batch.truth[:, 0].max() <= 90.0 + 1e-9


class TestNormStats:
    """Four-channel z-scoring from the train split."""

    def test_matches_pooled_numpy(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        cases = [load_case(tiny_dataset, e)
                 for e in select_cases(manifest, split="train",
                                       kind="idealized")]
        stats = NormStats.from_cases(cases)
        pooled = np.concatenate([c.surface_truth(r) for c in cases
                                 for r in ("rest", "hyperemic")])
        np.testing.assert_allclose(stats.mean, pooled.mean(axis=0), rtol=1e-9)
        np.testing.assert_allclose(stats.std, pooled.std(axis=0), rtol=1e-6)

    def test_round_trip(self):
        stats = NormStats(mean=np.array([1.0, 2.0, 3.0, 0.9]),
                          std=np.array([2.0, 1.0, 5.0, 0.1]))
        truth = np.array([[3.0, 1.0, 13.0, 0.8]])
        back = stats.denormalize(stats.normalize_truth(truth))
        np.testing.assert_allclose(back, truth, atol=1e-12)


class TestMetrics:
    """Hand-computed NMAE, correlation, agreement, and classification."""

    def test_nmae_hand_value(self):
        assert nmae([1.5, 2.0, 2.5], [1.0, 2.0, 3.0]) == \
            pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_nmae_identical_is_zero(self):
        assert nmae([4.0, 5.0, 6.0], [4.0, 5.0, 6.0]) == 0.0

    def test_nmae_scale_invariant(self):
        p = np.array([1.0, 2.0, 3.0])
        q = np.array([1.5, 2.0, 2.5])
        assert nmae(3.0 * q, 3.0 * p) == pytest.approx(nmae(q, p), rel=1e-12)

    def test_nmae_constant_truth_raises(self):
        with pytest.raises(ValidationError):
            nmae([1.0, 2.0], [3.0, 3.0])

    def test_pearson_proportional_pairs(self):
        r, p = pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
        assert r == pytest.approx(1.0, abs=1e-12)
        assert p == 0.0

    def test_pearson_p_value_closed_form(self):
        # r = 0.5 with n = 12: t = r*sqrt(n-2)/sqrt(1-r^2), p from the
        # t distribution with 10 dof; reference 0.09853 (scipy.stats).
        rng = np.random.default_rng(1)
        x = np.linspace(0, 1, 12)
        y = 0.5 * x + rng.normal(0, 0.15, 12)
        r, p = pearson(x, y)
        t = abs(r) * np.sqrt(10.0 / (1 - r * r))
        from scipy.stats import t as tdist
        assert p == pytest.approx(2 * tdist.sf(t, 10), rel=1e-10)

    def test_bland_altman_hand_values(self):
        out = bland_altman(pred=[1.1, 1.9], truth=[1.0, 2.0])
        assert out["mean_difference"] == pytest.approx(0.0, abs=1e-15)
        assert out["sd_difference"] == pytest.approx(0.1 * np.sqrt(2), rel=1e-12)
        assert out["loa_upper"] == pytest.approx(1.96 * 0.1 * np.sqrt(2), rel=1e-12)

    def test_classification_counts(self):
        truth = [0.9, 0.7, 0.75, 0.85]
        pred = [0.85, 0.75, 0.85, 0.7]
        out = classification_stats(pred, truth, threshold=0.8)
        assert out["accuracy"] == pytest.approx(0.5)
        assert out["sensitivity"] == pytest.approx(0.5)
        assert out["specificity"] == pytest.approx(0.5)

    def test_record_position_clamped_to_branch_end(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        case = load_case(tiny_dataset, manifest["cases"][0])
        branch = case.tree.branches[0]
        pos = _record_position(case.tree, branch.branch_id, branch.length + 5.0)
        np.testing.assert_allclose(pos, branch.points[-1], atol=1e-9)


class TestOracleSelfConsistency:
    """The metric stack on a perfect predictor must report perfection."""

    def test_all_metrics_perfect(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        cases = [load_case(tiny_dataset, e)
                 for e in select_cases(manifest, split="test")]
        metrics = evaluate_cases(cases, oracle_predictor)
        assert metrics["ffr_nmae_overall"] == 0.0
        down = metrics["downstream"]
        assert down["pearson_r"] == pytest.approx(1.0, abs=1e-12)
        assert down["bland_altman"]["mean_difference"] == 0.0
        assert down["classification"]["accuracy"] == 1.0
        for value in metrics["ffr_nmae_per_branch"].values():
            assert value in (None, 0.0)

    def test_worker_count_does_not_change_metrics(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        cases = [load_case(tiny_dataset, e)
                 for e in select_cases(manifest, split="test",
                                       kind="idealized")]
        seq = evaluate_cases(cases, oracle_predictor, workers=1)
        par = evaluate_cases(cases, oracle_predictor, workers=4)
        seq.pop("timing_s"), par.pop("timing_s")
        assert seq == par


@pytest.fixture(scope="module")
def results_dir(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("results")
    manifest = load_manifest(tiny_dataset)
    cases = [load_case(tiny_dataset, e)
             for e in select_cases(manifest, split="test", kind="idealized")]
    cache = {}

    def predict(case):
        cache[case.case_id] = oracle_predictor(case, n_points=256)
        return cache[case.case_id]

    metrics = evaluate_cases(cases, predict)
    metrics.pop("timing_s")
    tables = {}
    for case in cases:
        pred, batch = cache[case.case_id]["hyperemic"]
        tables[case.case_id] = case_point_table(case, batch, pred)
    write_results(str(out), metrics, tables)
    return str(out)


class TestResultsAndReport:
    """Persistence of metrics and deterministic SVG rendering."""

    def test_written_files(self, results_dir):
        with open(os.path.join(results_dir, "metrics.json")) as fh:
            metrics = json.load(fh)
        assert metrics["ffr_nmae_overall"] == 0.0
        points = os.listdir(os.path.join(results_dir, "points"))
        assert points == ["ideal003.csv"]

    def test_point_table_matches_truth(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset)
        case = load_case(tiny_dataset, manifest["cases"][0])
        pred, batch = oracle_predictor(case, n_points=64)["hyperemic"]
        rows = case_point_table(case, batch, pred)
        assert len(rows) == 64
        assert float(rows[0]["ffr_true"]) == pytest.approx(batch.truth[0, 3])
        assert float(rows[0]["ffr_pred"]) == float(rows[0]["ffr_true"])
        assert 0.0 <= float(rows[0]["s"])

    def test_report_files_and_determinism(self, results_dir, tmp_path):
        r1 = tmp_path / "r1"
        r2 = tmp_path / "r2"
        for target in (r1, r2):
            written = render_report(results_dir, out_dir=str(target))
            names = {os.path.basename(p) for p in written}
            assert {"summary.csv", "scatter.svg", "bland_altman.svg",
                    "ffr_ideal003.svg"} <= names
            for p in written:
                assert os.path.getsize(p) > 0
        for name in os.listdir(r1):
            assert read_bytes(str(r1 / name)) == read_bytes(str(r2 / name))


class TestTrainingContracts:
    """Loss-weight degeneracy, additivity, abort, and bitwise resume."""

    @staticmethod
    def _bias_head_to_lumen(trainer):
        # an untrained net may predict no lumen at all (a CaseError the
        # training loop handles separately); biasing the head keeps the
        # direct-loss contract checks on the main path
        name = next(k for k in trainer.models.seg_params if k.endswith("head.b"))
        trainer.models.seg_params[name].data[:] = (0.0, 2.0)

    def test_weight_degeneracy_pure_mae(self, coarse_dataset):
        trainer = debug_trainer(coarse_dataset)
        trainer.prepare()
        self._bias_head_to_lumen(trainer)
        case = trainer._case(trainer.pool[0])
        total, parts = joint_case_loss(
            trainer.models, trainer.norm, case, (0.0, 0.0, 0.0, 1.0),
            grad_patches=(0,), point_count=128, dtype=np.float64)
        clear_tape()
        with no_grad():
            build = build_whole_cloud(
                case, trainer.models.seg_params, trainer.models.seg_cfg,
                trainer.models.md_params, trainer.models.md_cfg,
                n_points=128, dtype=np.float64)
            maes = []
            for regime in ("rest", "hyperemic"):
                physio = getattr(PhysioParams, regime)()
                batch = cloud_to_batch(build, case, regime,
                                       conditioning_vector(physio))
                pred = pn_forward(trainer.models.pn_params,
                                  trainer.models.pn_cfg, batch.positions,
                                  batch.features, batch.h_t)
                maes.append(mae_loss(
                    pred, trainer.norm.normalize_truth(batch.truth)))
        expected = (maes[0].data + maes[1].data) / 2.0
        assert float(total.data) == float(expected)
        # Parts report unweighted term values, so ce/dice/mesh stay
        # visible in the history even when their weights are zero.
        assert parts["mae"] == pytest.approx(float(expected))

    def test_total_is_weighted_sum_of_parts(self, coarse_dataset):
        trainer = debug_trainer(coarse_dataset)
        trainer.prepare()
        self._bias_head_to_lumen(trainer)
        case = trainer._case(trainer.pool[0])
        weights = (1.0, 1.0, 0.5, 10.0)
        total, parts = joint_case_loss(
            trainer.models, trainer.norm, case, weights,
            grad_patches=(0, 1), point_count=128, dtype=np.float64)
        clear_tape()
        recomputed = sum(w * parts[k] for w, k in
                         zip(weights, ("ce", "dice", "mesh", "mae")))
        assert abs(float(total.data) - recomputed) < 1e-12

    def test_nan_loss_aborts_with_snapshot(self, coarse_dataset, tmp_path):
        trainer = debug_trainer(coarse_dataset, stage_a_iters=2,
                                stage_b_iters=0)
        trainer.prepare()
        name = next(k for k in trainer.models.seg_params if k.endswith("head.b"))
        trainer.models.seg_params[name].data[:] = np.nan
        with pytest.raises(TrainingError) as info:
            trainer.train(out_dir=str(tmp_path))
        assert info.value.snapshot is not None
        assert os.path.exists(info.value.snapshot)

    def test_resume_reproduces_next_loss_bitwise(self, coarse_dataset,
                                                 tmp_path):
        a = debug_trainer(coarse_dataset, stage_a_iters=2, stage_b_iters=2)
        a.prepare()
        a.train(out_dir=str(tmp_path / "run"))
        assert a.iteration == 4

        b = debug_trainer(coarse_dataset, stage_a_iters=2, stage_b_iters=3)
        ckpt = str(tmp_path / "mid.ckpt")
        for _ in range(4):
            b.step()
        b.save_state(ckpt)
        record_direct = b.step()

        c = load_training_state(ckpt, coarse_dataset)
        record_resumed = c.step()
        assert record_direct == record_resumed

    def test_case_limit_trains_and_probes_same_case(self, coarse_dataset):
        trainer = debug_trainer(coarse_dataset, case_limit=1,
                                early_stop_nmae=0.5, probe_cases=1)
        assert len(trainer.train_entries) == 1
        assert trainer.pool == trainer.train_entries
        assert trainer.probe_entries in ([], trainer.train_entries)

    def test_predict_case_shapes_and_units(self, coarse_dataset):
        trainer = debug_trainer(coarse_dataset, oracle_cloud=True)
        trainer.prepare()
        case = trainer._case(trainer.pool[0])
        out = trainer.predict_case(case)
        for regime in ("rest", "hyperemic"):
            pred, batch = out[regime]
            assert pred.shape == (256, 4)
            assert np.all(np.isfinite(pred))
            assert batch.truth.shape == (256, 4)
