"""Two-stage joint training of the segmentation, mesh, and point networks.

Stage A pretrains the voxel segmentation and mesh deformation networks on
patch supervision alone.  Stage B optimizes the composite objective

    total = l_ce * CE + l_dice * (1 - Dice) + l_mesh * surface + l_mae * MAE

rebuilding the whole-vessel cloud from current patch outputs each
iteration; the hemodynamic MAE term back-propagates through the sampled
feature grids into the upstream networks for a rotating random subset of
patches, which keeps the per-iteration cost bounded on a CPU.

Pressure, velocity, and shear targets are z-scored with statistics from the
training split only; the FFR channel is already dimensionless and stays
raw.  Checkpoints capture parameters, optimizer moments, the RNG state, the
normalization, and the loss history, so a resumed run reproduces the next
loss value bitwise.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import Adam, Tensor, backward, clear_tape, no_grad
from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import CaseError, TrainingError, ValidationError
from ..meshdeform import (MdConfig, ellipsoid_init, init_md_params,
                          level_topology, md_forward, mesh_loss)
from ..oracle import PhysioParams
from ..pointnet import (PnConfig, SetAbstraction, conditioning_vector,
                        init_pn_params, mae_loss, pn_forward)
from ..segnet import (SegConfig, init_seg_params, normalize_intensity,
                      seg_forward, seg_loss_terms)
from .cloud import (_grid_sampler, build_whole_cloud, case_patches,
                    cloud_to_batch, mask_boundary_voxels)
from .dataset import load_case, load_manifest
from .evaluate import nmae

logger = logging.getLogger(__name__)

REGIMES = ("rest", "hyperemic")
CASE_CACHE_SIZE = 32
CHECKPOINT_EVERY = 50


def _regime_physio():
    return (("rest", PhysioParams.rest()),
            ("hyperemic", PhysioParams.hyperemic()))


@dataclass
class NormStats:
    """Z-score statistics for the dimensional output channels.

    Channels follow the prediction layout (pressure mmHg, velocity cm/s,
    WSS dyn/cm^2); FFR is already a bounded ratio matched by the sigmoid
    output head, so it stays raw.  Statistics come from the train split
    only so the test split never leaks into the model.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_cases(cls, cases):
        n = 0
        total = np.zeros(3)
        total_sq = np.zeros(3)
        for case in cases:
            for regime in REGIMES:
                t = case.surface_truth(regime)[:, :3]
                n += len(t)
                total += t.sum(axis=0)
                total_sq += (t ** 2).sum(axis=0)
        if n == 0:
            raise ValidationError("normalization statistics need at least one case")
        mean = total / n
        var = np.maximum(total_sq / n - mean ** 2, 0.0)
        return cls(mean=mean, std=np.maximum(np.sqrt(var), 1e-6))

    def normalize_truth(self, truth):
        out = np.array(truth, dtype=np.float64)
        out[:, :3] = (out[:, :3] - self.mean) / self.std
        return out

    def denormalize(self, pred):
        out = np.array(pred, dtype=np.float64)
        out[:, :3] = out[:, :3] * self.std + self.mean
        return out


@dataclass
class TrainConfig:
    """Loss weights, schedule, and reproducibility knobs."""

    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lambda_mesh: float = 0.5
    lambda_mae: float = 10.0
    lr: float = 1e-3
    lr_decay_iters: int = 0     # halve the rate every this many iterations
    stage_a_iters: int = 200
    stage_b_iters: int = 300
    batch_patches: int = 2      # patches per stage-A step
    grad_patches: int = 2       # taped patches per stage-B step
    point_count: int = 2048
    kinds: tuple = ("idealized", "tree")
    probe_every: int = 25       # stage-B iterations between probe evaluations
    probe_cases: int = 4
    early_stop_nmae: float = 0.0   # 0 disables the probe-based stop
    time_budget_s: float = 0.0     # 0 disables the wall-clock stop
    oracle_cloud: bool = False     # ground-truth mask bypass (point net only)
    case_limit: int = 0            # use only the first N train cases (0 = all)
    seed: int = 7
    dtype: str = "float32"

    def __post_init__(self):
        w = self.weights
        if any(v < 0 for v in w):
            raise ValidationError("loss weights must be non-negative")
        if max(w) == 0:
            raise ValidationError("at least one loss weight must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if min(self.stage_a_iters, self.stage_b_iters) < 0:
            raise ValidationError("iteration counts must be non-negative")
        if self.point_count < 8:
            raise ValidationError("point count too small to form a cloud")
        if self.case_limit < 0:
            raise ValidationError("case_limit must be non-negative")
        self.kinds = tuple(self.kinds)

    @property
    def weights(self):
        return (self.lambda_ce, self.lambda_dice, self.lambda_mesh,
                self.lambda_mae)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Models:
    """The three networks with their configurations and parameters."""

    seg_cfg: SegConfig
    md_cfg: MdConfig
    pn_cfg: PnConfig
    seg_params: dict
    md_params: dict
    pn_params: dict

    @classmethod
    def init(cls, seed=0, seg_cfg=None, md_cfg=None, pn_cfg=None,
             dtype=np.float32):
        seg_cfg = seg_cfg or SegConfig()
        md_cfg = md_cfg or MdConfig()
        pn_cfg = pn_cfg or PnConfig()
        return cls(
            seg_cfg=seg_cfg, md_cfg=md_cfg, pn_cfg=pn_cfg,
            seg_params=init_seg_params(seg_cfg, np.random.default_rng([seed, 0]), dtype),
            md_params=init_md_params(md_cfg, np.random.default_rng([seed, 1]), dtype),
            pn_params=init_pn_params(pn_cfg, np.random.default_rng([seed, 2]), dtype),
        )

    def all_params(self):
        merged = {**self.seg_params, **self.md_params, **self.pn_params}
        if len(merged) != len(self.seg_params) + len(self.md_params) + len(self.pn_params):
            raise ValidationError("parameter name collision between networks")
        return merged


def _stack_sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _stack_mean(terms):
    total = _stack_sum(terms)
    if len(terms) > 1:
        total = total / float(len(terms))
    return total


def joint_case_loss(models, norm, case, weights, grad_patches, point_count,
                    dtype):
    """Composite loss for one case; returns (total Tensor, float parts).

    The weighted sum accumulates as l1*ce + l2*dice + l3*mesh + l4*mae, so
    zero weights contribute exact zeros and the (0,0,0,1) setting equals the
    plain hemodynamic MAE bitwise.
    """
    l1, l2, l3, l4 = weights
    grad = tuple(grad_patches)
    build = build_whole_cloud(case, models.seg_params, models.seg_cfg,
                              models.md_params, models.md_cfg,
                              n_points=point_count, grad_patches=grad,
                              dtype=dtype)
    zero = Tensor(np.zeros((), dtype=dtype))
    terms = {"ce": zero, "dice": zero, "mesh": zero}
    if build.seg_terms:
        ces, dices = [], []
        for logits, labels in build.seg_terms:
            ce, dice = seg_loss_terms(logits, labels)
            ces.append(ce)
            dices.append(1.0 - dice)
        terms["ce"] = _stack_mean(ces)
        terms["dice"] = _stack_mean(dices)
    if build.mesh_terms:
        per_patch = []
        for stages, target in build.mesh_terms:
            stage_losses = []
            for si, (verts, _) in enumerate(stages):
                topo = level_topology(models.md_cfg.base_level + si)
                stage_losses.append(mesh_loss(verts, target, topo=topo)[0])
            per_patch.append(_stack_sum(stage_losses))
        terms["mesh"] = _stack_mean(per_patch)
    maes = []
    for regime, physio in _regime_physio():
        batch = cloud_to_batch(build, case, regime, conditioning_vector(physio))
        pred = pn_forward(models.pn_params, models.pn_cfg, batch.positions,
                          batch.features, batch.h_t)
        target = norm.normalize_truth(batch.truth).astype(dtype)
        maes.append(mae_loss(pred, target))
    terms["mae"] = _stack_mean(maes)
    total = (l1 * terms["ce"] + l2 * terms["dice"] + l3 * terms["mesh"]
             + l4 * terms["mae"])
    parts = {k: float(v.data) for k, v in terms.items()}
    return total, parts


class Trainer:
    """Runs the two-stage schedule over a generated dataset directory."""

    def __init__(self, data_dir, config=None, models=None, norm=None,
                 history=None):
        self.data_dir = data_dir
        self.config = config or TrainConfig()
        manifest = load_manifest(data_dir)
        entries = [e for e in manifest["cases"]
                   if e["kind"] in self.config.kinds]
        self.train_entries = [e for e in entries if e["split"] == "train"]
        if self.config.case_limit > 0:
            self.train_entries = self.train_entries[:self.config.case_limit]
        if not self.train_entries:
            raise ValidationError(
                f"no training cases of kind {self.config.kinds} in {data_dir}")
        self.models = models or Models.init(seed=self.config.seed,
                                            dtype=self.config.np_dtype)
        self.norm = norm
        self.rng = np.random.default_rng(self.config.seed)
        self.adam = Adam(self.models.all_params(), lr=self.config.lr)
        self.history = list(history) if history else []
        self.iteration = 0
        self.out_dir = None
        self._cache = {}
        self._oracle_builds = {}
        self.out_dir = None
        # the early-stop probe watches the tail of the train split so the
        # held-out test cases never influence the stopping rule
        k = 0
        if self.config.early_stop_nmae > 0:
            k = min(self.config.probe_cases, len(self.train_entries) - 1)
        self.probe_entries = self.train_entries[-k:] if k > 0 else []
        self.pool = self.train_entries[:-k] if k > 0 else self.train_entries

    # ------------------------------------------------------------------
    # data access

    def _case(self, entry):
        cid = entry["case_id"]
        if cid not in self._cache:
            if len(self._cache) >= CASE_CACHE_SIZE:
                self._cache.pop(next(iter(self._cache)))
            self._cache[cid] = load_case(self.data_dir, entry)
        return self._cache[cid]

    def prepare(self):
        """Compute normalization statistics from the train split."""
        if self.norm is None:
            self.norm = NormStats.from_cases(
                self._case(e) for e in self.train_entries)
        return self.norm

    def _oracle_build(self, case):
        if case.case_id not in self._oracle_builds:
            build = build_whole_cloud(
                case, None, self.models.seg_cfg, None, self.models.md_cfg,
                n_points=self.config.point_count, dtype=self.config.np_dtype,
                oracle_mask=True)
            batches = {regime: cloud_to_batch(build, case, regime,
                                              conditioning_vector(physio))
                       for regime, physio in _regime_physio()}
            if len(self._oracle_builds) >= CASE_CACHE_SIZE:
                self._oracle_builds.pop(next(iter(self._oracle_builds)))
            self._oracle_builds[case.case_id] = (build, batches)
        return self._oracle_builds[case.case_id]

    # ------------------------------------------------------------------
    # steps

    def _patch_supervision(self, case, idx):
        """Segmentation and mesh losses on the chosen patches.

        Meshes are seeded from the true mask here (teacher forcing); the
        live cloud path seeds from the predicted mask instead.  Returns the
        weighted total and the float parts.
        """
        cfg = self.config
        patches = case_patches(case.volume, self.models.seg_cfg)
        batch = [patches[int(i)] for i in idx]
        dt = cfg.np_dtype
        x = np.stack([normalize_intensity(p.intensity)
                      for p in batch])[:, None].astype(dt)
        logits, grids = seg_forward(self.models.seg_params,
                                    self.models.seg_cfg, Tensor(x))
        labels = np.stack([p.mask for p in batch]).astype(np.int64)
        ce, dice = seg_loss_terms(logits, labels)
        l1, l2, l3, _ = cfg.weights
        parts = {"ce": float(ce.data), "dice": float(1.0 - dice.data),
                 "mesh": 0.0, "mae": 0.0}
        total = l1 * ce + l2 * (1.0 - dice)
        if l3 > 0:
            mesh_losses = []
            for b, patch in enumerate(batch):
                target = mask_boundary_voxels(patch.mask).astype(np.float64)
                if len(target) == 0:
                    continue
                center, half = ellipsoid_init(patch.mask)
                sampler = _grid_sampler([(g[b], s) for g, s in grids],
                                        patch, case.volume)
                stages = md_forward(self.models.md_params, self.models.md_cfg,
                                    sampler, center, half)
                per_stage = []
                for si, (verts, _) in enumerate(stages):
                    topo = level_topology(self.models.md_cfg.base_level + si)
                    per_stage.append(mesh_loss(verts, target, topo=topo)[0])
                mesh_losses.append(_stack_sum(per_stage))
            if mesh_losses:
                mesh_term = _stack_mean(mesh_losses)
                parts["mesh"] = float(mesh_term.data)
                total = total + l3 * mesh_term
        return total, parts

    def _pretrain_step(self):
        """Stage A: segmentation and mesh supervision on a patch batch."""
        cfg = self.config
        entry = self.pool[int(self.rng.integers(len(self.pool)))]
        case = self._case(entry)
        patches = case_patches(case.volume, self.models.seg_cfg)
        k = min(cfg.batch_patches, len(patches))
        idx = self.rng.choice(len(patches), size=k, replace=False)
        total, parts = self._patch_supervision(case, idx)
        return total, parts, case.case_id

    def _joint_step(self):
        """Stage B: full composite loss on one case's rebuilt cloud."""
        cfg = self.config
        entry = self.pool[int(self.rng.integers(len(self.pool)))]
        case = self._case(entry)
        if cfg.oracle_cloud:
            _, batches = self._oracle_build(case)
            maes = []
            for regime, _ in _regime_physio():
                batch = batches[regime]
                pred = pn_forward(self.models.pn_params, self.models.pn_cfg,
                                  batch.positions, batch.features, batch.h_t)
                target = self.norm.normalize_truth(batch.truth).astype(cfg.np_dtype)
                maes.append(mae_loss(pred, target))
            mae = _stack_mean(maes)
            total = cfg.lambda_mae * mae
            parts = {"ce": 0.0, "dice": 0.0, "mesh": 0.0,
                     "mae": float(mae.data)}
            return total, parts, case.case_id
        n_patches = len(case_patches(case.volume, self.models.seg_cfg))
        k = min(cfg.grad_patches, n_patches)
        grad = self.rng.choice(n_patches, size=k, replace=False)
        try:
            total, parts = joint_case_loss(
                self.models, self.norm, case, cfg.weights, grad,
                cfg.point_count, cfg.np_dtype)
        except CaseError:
            # the segmentation does not find a lumen here yet: keep the
            # iteration useful with patch supervision plus the point loss
            # on the ground-truth cloud (no extra rng draws, so resumed
            # runs replay identically)
            total, parts = self._patch_supervision(case, grad)
            _, batches = self._oracle_build(case)
            maes = []
            for regime, _ in _regime_physio():
                batch = batches[regime]
                pred = pn_forward(self.models.pn_params, self.models.pn_cfg,
                                  batch.positions, batch.features, batch.h_t)
                target = self.norm.normalize_truth(batch.truth).astype(cfg.np_dtype)
                maes.append(mae_loss(pred, target))
            mae = _stack_mean(maes)
            parts["mae"] = float(mae.data)
            parts["fallback"] = 1.0
            total = total + cfg.lambda_mae * mae
        return total, parts, case.case_id

    def _optimize(self, total, parts, case_id, stage):
        if not np.isfinite(total.data):
            clear_tape()
            path = self._diagnostic_snapshot(stage, case_id, parts)
            raise TrainingError(
                f"non-finite loss {float(total.data)} at iteration "
                f"{self.iteration + 1} on case {case_id}", snapshot=path)
        self.adam.zero_grad()
        backward(total)
        # the absolute-error gradient has constant magnitude, so a decaying
        # rate is what lets late iterations settle instead of orbiting
        self.adam.lr = self.config.lr * (
            0.5 ** (self.iteration // self.config.lr_decay_iters)
            if self.config.lr_decay_iters > 0 else 1.0)
        self.adam.step()
        clear_tape()
        self.iteration += 1
        record = {"iteration": self.iteration, "stage": stage,
                  "case": case_id, "total": float(total.data), **parts}
        self.history.append(record)
        return record

    def _diagnostic_snapshot(self, stage, case_id, parts):
        if not self.out_dir:
            return None
        path = os.path.join(self.out_dir, "diagnostic.ckpt")
        try:
            self.save_state(path)
        except Exception:
            return None
        logger.error("non-finite loss in stage %s on %s (parts %s); "
                     "snapshot at %s", stage, case_id, parts, path)
        return path

    def _probe(self):
        """Hyperemic FFR NMAE over the probe cases with current weights."""
        entries = self.probe_entries or self.pool[:max(
            1, min(self.config.probe_cases, len(self.pool)))]
        preds, truths = [], []
        for entry in entries:
            case = self._case(entry)
            try:
                pred, batch = self.predict_case(case)["hyperemic"]
            except CaseError:
                continue
            preds.append(pred[:, 3])
            truths.append(batch.truth[:, 3])
        if not preds:
            return float("inf")
        try:
            return nmae(np.concatenate(preds), np.concatenate(truths))
        except ValidationError:
            return float("inf")

    # ------------------------------------------------------------------
    # driver

    def step(self):
        """Run exactly one scheduled iteration; returns its history record.

        The stage is a pure function of the iteration counter, so single
        stepping and `train` produce identical sequences.
        """
        self.prepare()
        if self.iteration < self.config.stage_a_iters:
            total, parts, cid = self._pretrain_step()
            return self._optimize(total, parts, cid, "a")
        total, parts, cid = self._joint_step()
        return self._optimize(total, parts, cid, "b")

    def train(self, out_dir=None):
        """Run (or continue) the schedule; returns the loss history."""
        cfg = self.config
        self.out_dir = out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        self.prepare()
        start = time.perf_counter()
        end_iter = cfg.stage_a_iters + cfg.stage_b_iters
        stop_reason = "schedule complete"
        while self.iteration < end_iter:
            if cfg.time_budget_s > 0 and \
                    time.perf_counter() - start > cfg.time_budget_s:
                stop_reason = "time budget exhausted"
                break
            if self.iteration < cfg.stage_a_iters:
                total, parts, cid = self._pretrain_step()
                record = self._optimize(total, parts, cid, "a")
            else:
                total, parts, cid = self._joint_step()
                record = self._optimize(total, parts, cid, "b")
                b_iter = self.iteration - cfg.stage_a_iters
                if cfg.early_stop_nmae > 0 and b_iter % cfg.probe_every == 0:
                    probe = self._probe()
                    record["probe_nmae"] = probe
                    logger.info("iter %d probe FFR NMAE %.4f",
                                self.iteration, probe)
                    if probe <= cfg.early_stop_nmae:
                        stop_reason = f"probe NMAE {probe:.4f} reached target"
                        break
            if self.iteration % 10 == 0:
                logger.info("iter %d stage %s total %.4f (%s)",
                            record["iteration"], record["stage"],
                            record["total"], cid)
            if out_dir and self.iteration % CHECKPOINT_EVERY == 0:
                self.save_state(os.path.join(out_dir, "latest.ckpt"))
        logger.info("training stopped after %d iterations: %s",
                    self.iteration, stop_reason)
        if out_dir:
            self.save_state(os.path.join(out_dir, "final.ckpt"))
            self.save_log(os.path.join(out_dir, "training_log.csv"))
        return self.history

    def predict_case(self, case, n_points=None, dtype=None):
        """Physical-unit predictions for both regimes on one shared cloud.

        Returns {regime: (pred (n, 4) ndarray, PointBatch)}; channel order
        is pressure mmHg, velocity cm/s, WSS dyn/cm^2, FFR.
        """
        cfg = self.config
        self.prepare()
        dt = dtype or cfg.np_dtype
        out = {}
        with no_grad():
            if cfg.oracle_cloud:
                _, batches = self._oracle_build(case)
                for regime, batch in batches.items():
                    pred = pn_forward(self.models.pn_params, self.models.pn_cfg,
                                      batch.positions, batch.features, batch.h_t)
                    out[regime] = (self.norm.denormalize(pred.data), batch)
                return out
            build = build_whole_cloud(
                case, self.models.seg_params, self.models.seg_cfg,
                self.models.md_params, self.models.md_cfg,
                n_points=n_points or cfg.point_count, dtype=dt)
            for regime, physio in _regime_physio():
                batch = cloud_to_batch(build, case, regime,
                                       conditioning_vector(physio))
                pred = pn_forward(self.models.pn_params, self.models.pn_cfg,
                                  batch.positions, batch.features, batch.h_t)
                out[regime] = (self.norm.denormalize(pred.data), batch)
        return out

    # ------------------------------------------------------------------
    # persistence

    def save_state(self, path):
        self.prepare()
        arrays = {name: p.data for name, p in self.models.all_params().items()}
        arrays.update(self.adam.state_arrays())
        arrays["norm.mean"] = self.norm.mean
        arrays["norm.std"] = self.norm.std
        meta = {
            "kind": "coroflow-training",
            "iteration": self.iteration,
            "adam_t": int(self.adam.state.get("t", 0)) if self.adam.state else 0,
            "rng_state": self.rng.bit_generator.state,
            "train_config": asdict(self.config),
            "seg_cfg": asdict(self.models.seg_cfg),
            "md_cfg": asdict(self.models.md_cfg),
            "pn_cfg": asdict(self.models.pn_cfg),
            "history": self.history,
        }
        save_checkpoint(path, arrays, meta)
        return path

    def save_log(self, path):
        fields = ["iteration", "stage", "case", "total", "ce", "dice",
                  "mesh", "mae", "probe_nmae"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for record in self.history:
                writer.writerow({k: record.get(k, "") for k in fields})
        return path


def _models_from_checkpoint(arrays, meta):
    pn_meta = dict(meta["pn_cfg"])
    pn_cfg = PnConfig(
        in_features=pn_meta["in_features"],
        sa1=SetAbstraction(**pn_meta["sa1"]),
        sa2=SetAbstraction(**pn_meta["sa2"]),
        context=pn_meta["context"],
        head=pn_meta["head"],
        conditioning=pn_meta["conditioning"],
    )
    models = Models(
        seg_cfg=SegConfig(**meta["seg_cfg"]),
        md_cfg=MdConfig(**meta["md_cfg"]),
        pn_cfg=pn_cfg,
        seg_params={}, md_params={}, pn_params={},
    )
    for name, arr in arrays.items():
        if name.startswith(("adam.", "norm.")):
            continue
        tensor = Tensor(np.array(arr), requires_grad=True)
        if name.startswith("md."):
            models.md_params[name] = tensor
        elif name.startswith("pn."):
            models.pn_params[name] = tensor
        else:
            models.seg_params[name] = tensor
    return models


def load_training_state(path, data_dir):
    """Rebuild a Trainer from a checkpoint; resuming is bit-reproducible."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "coroflow-training":
        raise ValidationError(f"{path} is not a training checkpoint")
    config = TrainConfig(**{k: (tuple(v) if k == "kinds" else v)
                            for k, v in meta["train_config"].items()})
    models = _models_from_checkpoint(arrays, meta)
    norm = NormStats(mean=np.array(arrays["norm.mean"]),
                     std=np.array(arrays["norm.std"]))
    trainer = Trainer(data_dir, config, models=models, norm=norm,
                      history=meta.get("history", []))
    trainer.iteration = int(meta["iteration"])
    trainer.rng.bit_generator.state = meta["rng_state"]
    if meta.get("adam_t", 0):
        trainer.adam.load_state_arrays(arrays, meta["adam_t"])
    return trainer
