"""Synthetic dataset generation and on-disk case layout.

A dataset holds two families of cases:

* idealized: straight single-vessel tubes, one random stenosis each;
* tree: multi-branch synthetic coronary trees, where each base geometry
  spawns several stenosis variants that always share the base's split.

Every case directory stores the vessel tree (JSON), the voxelized volume,
solved hemodynamic fields at rest and hyperemia (CSV), and surface target
samples carrying the per-point truth channels.  A manifest ties the dataset
together and is byte-stable for a fixed configuration.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import CaseError, SolverError, ValidationError
from ..geometry import (IDEALIZED_DEGREE_RANGE, IDEALIZED_LENGTH_RANGE,
                        IDEALIZED_START_RANGE, StenosisSpec,
                        add_random_stenoses, load_tree, make_idealized_lad,
                        sample_base_tree, save_tree, surface_points)
from ..oracle import PhysioParams, simulate, field_from_csv, field_to_csv
from ..voxel import load_volume, save_volume, voxelize

log = logging.getLogger(__name__)

REGIMES = ("rest", "hyperemic")

SURFACE_COLUMNS = ("x_cm", "y_cm", "z_cm", "nx", "ny", "nz", "branch_id",
                   "s_cm", "pressure_mmhg", "velocity_cm_s", "wss_dyn_cm2",
                   "ffr", "wall_velocity_cm_s")


@dataclass(frozen=True)
class DatasetConfig:
    """Counts, resolutions, and the master seed for one dataset."""

    n_idealized: int = 120
    idealized_train: int = 100
    n_base_trees: int = 40
    variants_per_tree: int = 3
    tree_train_bases: int = 30
    idealized_spacing: tuple = (0.047, 0.038, 0.038)
    tree_spacing: tuple = (0.07, 0.06, 0.06)
    surface_samples: int = 3000
    seed: int = 2026
    max_failure_fraction: float = 0.05

    def validate(self):
        if self.n_idealized < 0 or not 0 <= self.idealized_train <= self.n_idealized:
            raise ValidationError("idealized counts inconsistent")
        if self.n_base_trees < 0 or not 0 <= self.tree_train_bases <= self.n_base_trees:
            raise ValidationError("tree counts inconsistent")
        if self.n_base_trees > 0 and self.variants_per_tree < 1:
            raise ValidationError("variants_per_tree must be at least 1")
        for name in ("idealized_spacing", "tree_spacing"):
            sp = getattr(self, name)
            if len(sp) != 3 or any(s <= 0 for s in sp):
                raise ValidationError(f"{name} must be three positive extents")
        if self.surface_samples < 10:
            raise ValidationError("surface_samples too small")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ValidationError("max_failure_fraction must lie in [0, 1]")


def _case_seed(master, *path):
    return np.random.SeedSequence([int(master)] + [int(p) for p in path])


def _sub_seeds(seq, n):
    return [int(s) for s in seq.generate_state(n, dtype=np.uint32)]


def _idealized_tree(rng):
    stenosis = StenosisSpec(
        start_s=float(rng.uniform(*IDEALIZED_START_RANGE)),
        length=float(rng.uniform(*IDEALIZED_LENGTH_RANGE)),
        degree=float(rng.uniform(*IDEALIZED_DEGREE_RANGE)))
    return make_idealized_lad(stenosis)


def write_surface_csv(path, surface, channels):
    """Surface targets with deterministic full-precision float text."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURFACE_COLUMNS)
        for i in range(len(surface)):
            writer.writerow([
                repr(float(surface.positions[i, 0])),
                repr(float(surface.positions[i, 1])),
                repr(float(surface.positions[i, 2])),
                repr(float(surface.normals[i, 0])),
                repr(float(surface.normals[i, 1])),
                repr(float(surface.normals[i, 2])),
                surface.branch_ids[surface.branch_index[i]],
                repr(float(surface.s[i])),
                repr(float(channels["pressure_mmhg"][i])),
                repr(float(channels["velocity_cm_s"][i])),
                repr(float(channels["wss_dyn_cm2"][i])),
                repr(float(channels["ffr"][i])),
                repr(float(channels["wall_velocity_cm_s"][i])),
            ])


def read_surface_csv(path):
    """Returns a dict of arrays keyed by column (branch_id stays strings)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SURFACE_COLUMNS:
            raise ValidationError(f"{path}: unexpected columns {header}")
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: empty surface file")
    cols = list(zip(*rows))
    out = {}
    for j, name in enumerate(SURFACE_COLUMNS):
        if name == "branch_id":
            out[name] = list(cols[j])
        else:
            out[name] = np.array([float(v) for v in cols[j]])
    return out


def _generate_one(case_dir, tree, spacing, noise_seed, surface_seed, n_surface):
    """Voxelize, solve both regimes, and persist one case directory."""
    os.makedirs(case_dir, exist_ok=True)
    save_tree(os.path.join(case_dir, "tree.json"), tree)
    vol = voxelize(tree, spacing=spacing, noise_seed=noise_seed)
    save_volume(os.path.join(case_dir, "volume.bin"), vol)
    surface = surface_points(tree, n_surface, seed=surface_seed)
    for regime in REGIMES:
        physio = PhysioParams.rest() if regime == "rest" else PhysioParams.hyperemic()
        field = simulate(tree, physio)
        field_to_csv(os.path.join(case_dir, f"field_{regime}.csv"), field)
        channels = field.map_to_surface(surface)
        write_surface_csv(os.path.join(case_dir, f"surface_{regime}.csv"),
                          surface, channels)


def generate_dataset(config, out_dir, workers=1):
    """Generate every case and write `manifest.json`; returns the manifest.

    Failed cases (solver or geometry errors) are excluded and logged; if the
    failure fraction exceeds the configured tolerance a CaseError is raised.
    Cases are independent (each draws from its own derived seed), so with
    `workers` > 1 they run on a thread pool; the manifest keeps submission
    order and the output bytes match a single-worker run.
    """
    config.validate()
    os.makedirs(os.path.join(out_dir, "cases"), exist_ok=True)

    def attempt(case_id, base_id, kind, split, builder, spacing, seeds):
        noise_seed, surface_seed = seeds
        case_dir = os.path.join(out_dir, "cases", case_id)
        try:
            tree = builder()
            _generate_one(case_dir, tree, spacing, noise_seed, surface_seed,
                          config.surface_samples)
        except (SolverError, ValidationError, CaseError) as exc:
            log.warning("case %s failed: %s", case_id, exc)
            return None, {"case_id": case_id, "reason": str(exc)}
        return {
            "case_id": case_id,
            "base_id": base_id,
            "kind": kind,
            "split": split,
            "path": f"cases/{case_id}",
            "n_stenoses": sum(len(b.stenoses) for b in tree.branches),
        }, None

    jobs = []
    for i in range(config.n_idealized):
        seq = _case_seed(config.seed, 0, i)
        geom_seed, noise_seed, surf_seed = _sub_seeds(seq, 3)
        split = "train" if i < config.idealized_train else "test"
        jobs.append((f"ideal{i:03d}", f"ideal{i:03d}", "idealized", split,
                     lambda s=geom_seed: _idealized_tree(np.random.default_rng(s)),
                     config.idealized_spacing, (noise_seed, surf_seed)))

    for b in range(config.n_base_trees):
        split = "train" if b < config.tree_train_bases else "test"
        base_seq = _case_seed(config.seed, 1, b)
        base_seed = _sub_seeds(base_seq, 1)[0]
        for v in range(config.variants_per_tree):
            seq = _case_seed(config.seed, 1, b, v)
            sten_seed, noise_seed, surf_seed = _sub_seeds(seq, 3)
            jobs.append((f"tree{b:03d}v{v}", f"tree{b:03d}", "tree", split,
                         lambda bs=base_seed, ss=sten_seed: add_random_stenoses(
                             sample_base_tree(bs), ss),
                         config.tree_spacing, (noise_seed, surf_seed)))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: attempt(*j), jobs))
    else:
        results = [attempt(*job) for job in jobs]
    cases = [entry for entry, _ in results if entry is not None]
    failed = [failure for _, failure in results if failure is not None]

    total = len(cases) + len(failed)
    manifest = {
        "schema": "coroflow-dataset",
        "version": 1,
        "config": asdict(config),
        "cases": cases,
        "failed": failed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if total and len(failed) > config.max_failure_fraction * total:
        raise CaseError(
            f"{len(failed)} of {total} cases failed, above the "
            f"{config.max_failure_fraction:.0%} tolerance")
    log.info("dataset complete: %d cases (%d failed) in %s",
             len(cases), len(failed), out_dir)
    return manifest


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ValidationError(f"no manifest at {path}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != "coroflow-dataset":
        raise ValidationError(f"{path} is not a dataset manifest")
    return manifest


def select_cases(manifest, split=None, kind=None):
    """Case entries filtered by split ('train'|'test') and kind."""
    out = []
    for case in manifest["cases"]:
        if split is not None and case["split"] != split:
            continue
        if kind is not None and case["kind"] != kind:
            continue
        out.append(case)
    return out


@dataclass
class LoadedCase:
    """One case pulled back into memory."""

    case_id: str
    kind: str
    split: str
    tree: object
    volume: object
    fields: dict      # regime -> HemoField
    surfaces: dict    # regime -> dict of column arrays

    def surface_positions(self, regime):
        s = self.surfaces[regime]
        return np.column_stack([s["x_cm"], s["y_cm"], s["z_cm"]])

    def surface_truth(self, regime):
        """(n, 4) truth channels in physical units, network channel order."""
        s = self.surfaces[regime]
        return np.column_stack([s["pressure_mmhg"], s["velocity_cm_s"],
                                s["wss_dyn_cm2"], s["ffr"]])


def load_case(data_dir, case_entry):
    base = os.path.join(data_dir, case_entry["path"])
    return LoadedCase(
        case_id=case_entry["case_id"],
        kind=case_entry["kind"],
        split=case_entry["split"],
        tree=load_tree(os.path.join(base, "tree.json")),
        volume=load_volume(os.path.join(base, "volume.bin")),
        fields={r: field_from_csv(os.path.join(base, f"field_{r}.csv"))
                for r in REGIMES},
        surfaces={r: read_surface_csv(os.path.join(base, f"surface_{r}.csv"))
                  for r in REGIMES},
    )
