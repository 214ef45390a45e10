"""Parametric coronary-tree geometry.

All lengths are centimetres.  A branch is a sampled centerline polyline with a
base radius profile; stenoses multiply the base radius by a raised-cosine dip
so the profile stays continuous.  Trees are a stem plus named main branches
(LAD, LCx, RCA), each with one sub-branch, children attached at exact parent
centerline samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, TopologyError, ValidationError

TREE_FORMAT = "coroflow-vessel-tree"

IDEALIZED_LENGTH = 2.0       # cm, straight LAD segment
IDEALIZED_RADIUS = 0.15      # cm (0.3 cm diameter)
IDEALIZED_START_RANGE = (0.5, 1.5)
IDEALIZED_LENGTH_RANGE = (0.2, 0.4)
IDEALIZED_DEGREE_RANGE = (0.5, 0.7)

MAIN_BRANCHES = ("LAD", "LCx", "RCA")


@dataclass(frozen=True)
class StenosisSpec:
    """A focal narrowing: [start_s, start_s + length] with diameter reduction
    `degree` at the midpoint (degree 0.5 halves the radius)."""

    start_s: float
    length: float
    degree: float

    def validate(self, branch_length, permissive=False):
        if not 0.0 < self.degree < 1.0:
            raise ValidationError(f"stenosis degree must be in (0,1), got {self.degree}")
        if self.length <= 0.0:
            raise ValidationError(f"stenosis length must be positive, got {self.length}")
        if self.start_s < 0.0 or self.start_s + self.length > branch_length + 1e-9:
            raise ValidationError(
                f"stenosis [{self.start_s}, {self.start_s + self.length}] falls outside "
                f"the branch span [0, {branch_length}]")
        if permissive:
            return
        checks = (("start", self.start_s, IDEALIZED_START_RANGE),
                  ("length", self.length, IDEALIZED_LENGTH_RANGE),
                  ("degree", self.degree, IDEALIZED_DEGREE_RANGE))
        for name, value, (lo, hi) in checks:
            if not lo <= value <= hi:
                raise ValidationError(
                    f"stenosis {name} {value} outside the sampled range [{lo}, {hi}]")

    @property
    def end_s(self):
        return self.start_s + self.length


def _cumulative_arclength(points):
    deltas = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(deltas)])


@dataclass
class Branch:
    """One vessel segment: sampled centerline, radius profile, stenoses."""

    branch_id: str
    parent: str | None
    points: np.ndarray            # (m, 3) cm
    base_radius: np.ndarray       # (m,) cm
    stenoses: list[StenosisSpec] = field(default_factory=list)
    arclength: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.base_radius = np.asarray(self.base_radius, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 2:
            raise ValidationError(f"branch {self.branch_id!r}: centerline must be (m>=2, 3)")
        if self.base_radius.shape != (len(self.points),):
            raise ValidationError(f"branch {self.branch_id!r}: one radius per sample required")
        if np.any(self.base_radius <= 0.0):
            raise ValidationError(f"branch {self.branch_id!r}: radii must be positive")
        self.arclength = _cumulative_arclength(self.points)
        if np.any(np.diff(self.arclength) <= 0.0):
            raise ValidationError(f"branch {self.branch_id!r}: repeated centerline points")

    @property
    def length(self):
        return float(self.arclength[-1])

    def _check_span(self, s):
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < -1e-9) or np.any(s > self.length + 1e-9):
            raise DomainError(
                f"arclength outside [0, {self.length:.6g}] on branch {self.branch_id!r}")
        return np.clip(s, 0.0, self.length)

    def base_radius_at(self, s):
        s = self._check_span(s)
        return np.interp(s, self.arclength, self.base_radius)

    def stenosis_factor(self, s):
        """Product of raised-cosine dips over all stenoses covering s."""
        s = np.asarray(s, dtype=np.float64)
        factor = np.ones_like(s, dtype=np.float64)
        for st in self.stenoses:
            inside = (s >= st.start_s) & (s <= st.end_s)
            phase = 2.0 * np.pi * (s - st.start_s) / st.length
            dip = 1.0 - 0.5 * st.degree * (1.0 - np.cos(phase))
            factor = factor * np.where(inside, dip, 1.0)
        return factor

    def radius_at(self, s):
        """Effective lumen radius: base profile times stenosis factors."""
        scalar = np.isscalar(s) or np.asarray(s).ndim == 0
        r = self.base_radius_at(s) * self.stenosis_factor(np.clip(s, 0.0, self.length))
        return float(r) if scalar else r

    def point_at(self, s):
        s = self._check_span(s)
        out = np.empty(np.shape(s) + (3,))
        for ax in range(3):
            out[..., ax] = np.interp(s, self.arclength, self.points[:, ax])
        return out

    def segment_index(self, s):
        s = self._check_span(s)
        idx = np.searchsorted(self.arclength, s, side="right") - 1
        return np.clip(idx, 0, len(self.points) - 2)

    def tangent_at(self, s):
        idx = self.segment_index(s)
        seg = self.points[idx + 1] - self.points[idx]
        return seg / np.linalg.norm(seg, axis=-1, keepdims=True)

    def segment_frames(self):
        """Per-segment orthonormal (tangent, e1, e2), e1 parallel-transported."""
        seg = np.diff(self.points, axis=0)
        tangents = seg / np.linalg.norm(seg, axis=1, keepdims=True)
        e1 = np.empty_like(tangents)
        seed_axis = np.eye(3)[np.argmin(np.abs(tangents[0]))]
        first = seed_axis - np.dot(seed_axis, tangents[0]) * tangents[0]
        e1[0] = first / np.linalg.norm(first)
        for i in range(1, len(tangents)):
            v = e1[i - 1] - np.dot(e1[i - 1], tangents[i]) * tangents[i]
            norm = np.linalg.norm(v)
            if norm < 1e-12:  # right-angle kink fallback
                v = np.cross(tangents[i], e1[i - 1])
                norm = np.linalg.norm(v)
            e1[i] = v / norm
        e2 = np.cross(tangents, e1)
        return tangents, e1, e2

    def radius_slope_at(self, s, h=1e-4):
        lo = np.clip(np.asarray(s, dtype=np.float64) - h, 0.0, self.length)
        hi = np.clip(np.asarray(s, dtype=np.float64) + h, 0.0, self.length)
        return (self.radius_at(hi) - self.radius_at(lo)) / np.maximum(hi - lo, 1e-12)


@dataclass
class VesselTree:
    """A rooted collection of branches; children attach on parent centerlines."""

    branches: list[Branch]
    root: str
    label: str = ""

    def __post_init__(self):
        self.validate()

    def branch(self, branch_id):
        for b in self.branches:
            if b.branch_id == branch_id:
                return b
        raise TopologyError(f"no branch {branch_id!r} in tree {self.label!r}")

    def children_of(self, branch_id):
        return [b for b in self.branches if b.parent == branch_id]

    def leaves(self):
        ids_with_children = {b.parent for b in self.branches if b.parent}
        return [b for b in self.branches if b.branch_id not in ids_with_children]

    def validate(self):
        ids = [b.branch_id for b in self.branches]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate branch ids")
        roots = [b for b in self.branches if b.parent is None]
        if len(roots) != 1 or roots[0].branch_id != self.root:
            raise TopologyError(f"exactly one parentless branch named {self.root!r} required")
        lookup = {b.branch_id: b for b in self.branches}
        for b in self.branches:
            if b.parent is not None:
                if b.parent not in lookup:
                    raise TopologyError(f"branch {b.branch_id!r} has unknown parent {b.parent!r}")
                dist = _distance_to_polyline(b.points[0], lookup[b.parent].points)
                if dist > 1e-8:
                    raise TopologyError(
                        f"branch {b.branch_id!r} origin is {dist:.3g} cm off its parent")
        # reachability (also rejects cycles)
        seen = set()
        stack = [self.root]
        while stack:
            cur = stack.pop()
            if cur in seen:
                raise TopologyError(f"cycle through branch {cur!r}")
            seen.add(cur)
            stack.extend(c.branch_id for c in self.children_of(cur))
        if seen != set(ids):
            raise TopologyError(f"unreachable branches: {sorted(set(ids) - seen)}")
        for b in self.branches:
            for st in b.stenoses:
                st.validate(b.length, permissive=True)

    def bounds(self, padding=0.0):
        pts = np.concatenate([b.points for b in self.branches])
        pad = max(float(b.base_radius.max()) for b in self.branches) + padding
        return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def _distance_to_polyline(point, pts):
    a = pts[:-1]
    d = pts[1:] - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", point - a, d) / denom, 0.0, 1.0)
    closest = a + t[:, None] * d
    return float(np.min(np.linalg.norm(point - closest, axis=1)))


def attachment_arclength(parent, point):
    """Arclength on the parent where a child origin attaches."""
    a = parent.points[:-1]
    d = parent.points[1:] - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", point - a, d) / denom, 0.0, 1.0)
    closest = a + t[:, None] * d
    dist = np.linalg.norm(point - closest, axis=1)
    i = int(np.argmin(dist))
    seg_len = parent.arclength[i + 1] - parent.arclength[i]
    return float(parent.arclength[i] + t[i] * seg_len)


# ---------------------------------------------------------------------------
# generators

def make_idealized_lad(stenosis=None, permissive=False, samples=201):
    """A straight 2 cm LAD of 0.15 cm radius, optionally with one stenosis.

    Stenosis parameters are validated against the sampled ranges (start in
    [0.5, 1.5] cm, length in [0.2, 0.4] cm, degree in [0.5, 0.7]) unless
    `permissive` is set, which only enforces geometric consistency.
    """
    stenoses = []
    if stenosis is not None:
        stenosis.validate(IDEALIZED_LENGTH, permissive=permissive)
        stenoses = [stenosis]
    s = np.linspace(0.0, IDEALIZED_LENGTH, samples)
    points = np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
    branch = Branch("LAD", None, points, np.full(samples, IDEALIZED_RADIUS),
                    stenoses=stenoses)
    return VesselTree([branch], root="LAD", label="idealized-lad")


@dataclass(frozen=True)
class TreeRanges:
    """Uniform sampling ranges for synthetic trees (all lengths in cm)."""

    stem_length: tuple = (0.8, 1.4)
    stem_radius: tuple = (0.16, 0.20)
    main_length: tuple = (2.4, 3.6)
    main_radius: tuple = (0.11, 0.16)
    sub_length: tuple = (1.2, 2.0)
    sub_radius_scale: tuple = (0.60, 0.80)
    taper: tuple = (0.65, 0.85)
    lateral_amplitude: tuple = (0.02, 0.12)
    stenosis_counts: tuple = (0, 1, 2)
    stenosis_degree: tuple = (0.40, 0.70)
    stenosis_length: tuple = (0.20, 0.45)
    samples_per_cm: int = 25

    def validate(self):
        for name in ("stem_length", "stem_radius", "main_length", "main_radius",
                     "sub_length", "sub_radius_scale", "taper", "lateral_amplitude",
                     "stenosis_degree", "stenosis_length"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValidationError(f"tree range {name} must satisfy 0 < lo <= hi")
        if self.stenosis_degree[1] >= 1.0:
            raise ValidationError("stenosis degree range must stay below 1")
        if any(c < 0 for c in self.stenosis_counts):
            raise ValidationError("stenosis counts must be non-negative")
        if self.samples_per_cm < 4:
            raise ValidationError("samples_per_cm must be at least 4")


def _unit(v):
    return v / np.linalg.norm(v)


def _orthonormal_pair(t):
    seed_axis = np.eye(3)[np.argmin(np.abs(t))]
    u = _unit(seed_axis - np.dot(seed_axis, t) * t)
    return u, np.cross(t, u)


def _curved_centerline(start, direction, length, amplitude, rng, samples_per_cm):
    """Straight run plus lateral sine modes that vanish at both endpoints."""
    m = max(int(round(length * samples_per_cm)), 8) + 1
    u = np.linspace(0.0, 1.0, m)
    e1, e2 = _orthonormal_pair(direction)
    lateral = np.zeros((m, 2))
    for mode in (1, 2):
        amp = rng.uniform(-amplitude, amplitude, size=2) / mode
        lateral += np.outer(np.sin(np.pi * mode * u), amp)
    pts = (start[None, :] + np.outer(u * length, direction)
           + np.outer(lateral[:, 0], e1) + np.outer(lateral[:, 1], e2))
    return pts


def _rotate_about(v, axis, angle):
    axis = _unit(axis)
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * np.dot(axis, v) * (1.0 - np.cos(angle)))


def sample_base_tree(seed, ranges=TreeRanges()):
    """Stem + LAD/LCx/RCA, one sub-branch each, no stenoses yet."""
    ranges.validate()
    rng = np.random.default_rng(seed)
    u = lambda pair: float(rng.uniform(*pair))

    stem_dir = _unit(np.array([1.0, rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)]))
    stem_len = u(ranges.stem_length)
    stem_r = u(ranges.stem_radius)
    amp = u(ranges.lateral_amplitude) * 0.5
    stem_pts = _curved_centerline(np.zeros(3), stem_dir, stem_len, amp, rng,
                                  ranges.samples_per_cm)
    stem_prof = np.linspace(stem_r, stem_r * 0.95, len(stem_pts))
    branches = [Branch("stem", None, stem_pts, stem_prof)]

    t_end = _unit(stem_pts[-1] - stem_pts[-2])
    e1, e2 = _orthonormal_pair(t_end)
    # distinct take-off sectors keep the three mains from colliding
    base_dirs = {
        "LAD": t_end + 0.40 * e1,
        "LCx": t_end - 0.55 * e1 + 0.40 * e2,
        "RCA": t_end + 0.10 * e1 - 0.65 * e2,
    }
    for name in MAIN_BRANCHES:
        direction = _unit(base_dirs[name] + rng.uniform(-0.08, 0.08, size=3))
        length = u(ranges.main_length)
        r_prox = min(u(ranges.main_radius), 0.95 * stem_prof[-1])
        taper = u(ranges.taper)
        pts = _curved_centerline(stem_pts[-1], direction, length,
                                 u(ranges.lateral_amplitude), rng, ranges.samples_per_cm)
        prof = np.linspace(r_prox, r_prox * taper, len(pts))
        main = Branch(name, "stem", pts, prof)
        branches.append(main)

        attach_idx = int(rng.integers(len(pts) // 3, 2 * len(pts) // 3))
        parent_t = _unit(pts[attach_idx + 1] - pts[attach_idx])
        axis_u, axis_v = _orthonormal_pair(parent_t)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        angle = rng.uniform(np.deg2rad(35.0), np.deg2rad(55.0))
        sub_dir = _rotate_about(parent_t, np.cos(phi) * axis_u + np.sin(phi) * axis_v, angle)
        sub_len = u(ranges.sub_length)
        sub_r = float(prof[attach_idx]) * u(ranges.sub_radius_scale)
        sub_pts = _curved_centerline(pts[attach_idx], sub_dir, sub_len,
                                     u(ranges.lateral_amplitude) * 0.7, rng,
                                     ranges.samples_per_cm)
        sub_prof = np.linspace(sub_r, sub_r * u(ranges.taper), len(sub_pts))
        branches.append(Branch(name + "_sub", name, sub_pts, sub_prof))

    return VesselTree(branches, root="stem", label=f"tree-{seed}")


def add_random_stenoses(tree, seed, ranges=TreeRanges()):
    """A copy of the tree with fresh stenoses on the three main branches.

    Per main branch the count is drawn uniformly from `ranges.stenosis_counts`
    (default {0, 1, 2}); positions avoid the outer 10% of the branch.
    """
    ranges.validate()
    rng = np.random.default_rng(seed)
    branches = []
    for b in tree.branches:
        stenoses = []
        if b.branch_id in MAIN_BRANCHES:
            count = int(rng.choice(ranges.stenosis_counts))
            for _ in range(count):
                length = float(rng.uniform(*ranges.stenosis_length))
                length = min(length, 0.6 * b.length)
                lo, hi = 0.1 * b.length, 0.9 * b.length - length
                start = float(rng.uniform(lo, max(hi, lo + 1e-6)))
                degree = float(rng.uniform(*ranges.stenosis_degree))
                stenoses.append(StenosisSpec(start, length, degree))
        branches.append(Branch(b.branch_id, b.parent, b.points.copy(),
                               b.base_radius.copy(), stenoses=stenoses))
    return VesselTree(branches, root=tree.root, label=tree.label)


def make_synthetic_tree(seed, ranges=TreeRanges()):
    """Base geometry and stenoses from one seed (two derived substreams)."""
    base = sample_base_tree(seed, ranges)
    stenosis_seed = int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0])
    return add_random_stenoses(base, stenosis_seed, ranges)


# ---------------------------------------------------------------------------
# surface sampling

@dataclass
class SurfacePoints:
    """Points on the lumen wall with their source branch, arclength, normal."""

    positions: np.ndarray     # (n, 3)
    normals: np.ndarray       # (n, 3) outward
    branch_index: np.ndarray  # (n,) index into branch_ids
    s: np.ndarray             # (n,) arclength on the source branch
    branch_ids: list[str]

    def __len__(self):
        return len(self.positions)


def surface_points(tree, n, seed):
    """Sample n points on the tube surface, area-weighted across segments.

    Deterministic for a given seed.  Each point lies exactly radius_at(s) from
    its interpolated centerline point; normals account for the radius slope.
    """
    if n <= 0:
        raise ValidationError("surface point count must be positive")
    rng = np.random.default_rng(seed)
    seg_branch, seg_index, weights = [], [], []
    frames = {}
    for bi, b in enumerate(tree.branches):
        tangents, e1, e2 = b.segment_frames()
        frames[bi] = (tangents, e1, e2)
        mids = 0.5 * (b.arclength[:-1] + b.arclength[1:])
        ds = np.diff(b.arclength)
        dr = np.diff(b.radius_at(b.arclength))
        area = 2.0 * np.pi * b.radius_at(mids) * np.hypot(ds, dr)
        seg_branch.append(np.full(len(mids), bi))
        seg_index.append(np.arange(len(mids)))
        weights.append(area)
    seg_branch = np.concatenate(seg_branch)
    seg_index = np.concatenate(seg_index)
    weights = np.concatenate(weights)
    probs = weights / weights.sum()

    chosen = rng.choice(len(probs), size=n, p=probs)
    t_frac = rng.uniform(0.0, 1.0, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)

    positions = np.empty((n, 3))
    normals = np.empty((n, 3))
    branch_index = seg_branch[chosen]
    s_out = np.empty(n)
    for bi, b in enumerate(tree.branches):
        pick = branch_index == bi
        if not pick.any():
            continue
        segs = seg_index[chosen[pick]]
        tangents, e1, e2 = frames[bi]
        s_lo = b.arclength[segs]
        s_val = s_lo + t_frac[pick] * (b.arclength[segs + 1] - s_lo)
        center = b.points[segs] + (t_frac[pick, None]
                                   * (b.points[segs + 1] - b.points[segs]))
        radial = (np.cos(theta[pick])[:, None] * e1[segs]
                  + np.sin(theta[pick])[:, None] * e2[segs])
        r = b.radius_at(s_val)
        positions[pick] = center + r[:, None] * radial
        slope = b.radius_slope_at(s_val)
        raw = radial - slope[:, None] * tangents[segs]
        normals[pick] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        s_out[pick] = s_val
    return SurfacePoints(positions, normals, branch_index, s_out,
                         [b.branch_id for b in tree.branches])


# ---------------------------------------------------------------------------
# serialisation (explicit units in key names; lossless at 64-bit)

def tree_to_json(tree):
    return {
        "format": TREE_FORMAT,
        "units": "cm",
        "label": tree.label,
        "root": tree.root,
        "branches": [
            {
                "id": b.branch_id,
                "parent": b.parent,
                "centerline_cm": b.points.tolist(),
                "radius_cm": b.base_radius.tolist(),
                "stenoses": [
                    {"start_s_cm": st.start_s, "length_cm": st.length, "degree": st.degree}
                    for st in b.stenoses
                ],
            }
            for b in tree.branches
        ],
    }


def tree_from_json(doc):
    if doc.get("format") != TREE_FORMAT:
        raise ValidationError(f"not a {TREE_FORMAT} document")
    if doc.get("units") != "cm":
        raise ValidationError(f"unsupported units {doc.get('units')!r}")
    branches = [
        Branch(
            spec["id"],
            spec["parent"],
            np.array(spec["centerline_cm"], dtype=np.float64),
            np.array(spec["radius_cm"], dtype=np.float64),
            stenoses=[StenosisSpec(st["start_s_cm"], st["length_cm"], st["degree"])
                      for st in spec["stenoses"]],
        )
        for spec in doc["branches"]
    ]
    return VesselTree(branches, root=doc["root"], label=doc.get("label", ""))


def save_tree(path, tree):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_json(tree), fh, sort_keys=True, separators=(",", ": "), indent=1)
        fh.write("\n")


def load_tree(path):
    with open(path, "r", encoding="utf-8") as fh:
        return tree_from_json(json.load(fh))
