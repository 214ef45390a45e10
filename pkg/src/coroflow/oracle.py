"""Reduced-order coronary hemodynamics in CGS units.

Each vessel span is a 1-D Poiseuille conduit with shear-dependent (Carreau)
viscosity evaluated at the wall shear rate 4Q/(pi r^3); focal stenoses add an
expansion loss K_e * rho/2 * Q^2 * (1/A_s - 1/A_0)^2 in the classic
upstream-velocity form.  Outlets carry lumped microcirculatory resistances
distributed by Murray's law (R proportional to r^-3) so their parallel
combination equals the regime's total R_micro.  Flows solve a Newton system
on the outlet flow vector with a finite-difference Jacobian.

Pressures are dyn/cm^2 internally (1 mmHg = 1333.22 dyn/cm^2), flow cm^3/s,
lengths cm, viscosity dyn*s/cm^2 (poise).
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError, ValidationError
from .geometry import attachment_arclength

MMHG_TO_DYN_CM2 = 1333.22

EXPANSION_COEFF = 1.52        # stenosis expansion-loss coefficient
BLOOD_DENSITY = 1.06          # g/cm^3 (1060 kg/m^3)
R_MICRO_REST = 170_000.0      # dyn*s/cm^5, total distal resistance at rest
R_MICRO_HYPEREMIC = 50_000.0  # dyn*s/cm^5 under induced hyperemia

REGIMES = ("rest", "hyperemic")


@dataclass(frozen=True)
class CarreauParams:
    """Carreau shear-thinning constants for blood, in poise and seconds."""

    mu_0: float = 0.56
    mu_inf: float = 0.0345
    lambda_c: float = 3.313
    n_c: float = 0.3568

    def validate(self):
        if not 0.0 < self.mu_inf <= self.mu_0:
            raise ValidationError("Carreau needs 0 < mu_inf <= mu_0")
        if not 0.0 < self.n_c < 1.0:
            raise ValidationError("Carreau index must lie in (0, 1)")

    def viscosity(self, gamma):
        g = np.abs(np.asarray(gamma, dtype=np.float64))
        return self.mu_inf + (self.mu_0 - self.mu_inf) * (
            1.0 + (self.lambda_c * g) ** 2) ** ((self.n_c - 1.0) / 2.0)


def carreau_viscosity(gamma, params=CarreauParams()):
    """Apparent viscosity (poise) at shear rate gamma (1/s)."""
    params.validate()
    return params.viscosity(gamma)


@dataclass(frozen=True)
class PhysioParams:
    """Inlet pressure, distal resistance, blood model for one regime."""

    regime: str
    p_inlet_mmhg: float = 90.0
    r_micro: float = R_MICRO_REST
    rho: float = BLOOD_DENSITY
    carreau: CarreauParams | None = CarreauParams()
    mu_fixed: float = 0.035   # poise, used when carreau is None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.p_inlet_mmhg <= 0 or self.r_micro <= 0 or self.rho <= 0 or self.mu_fixed <= 0:
            raise ValidationError("physiological parameters must be positive")
        if self.carreau is not None:
            self.carreau.validate()

    @classmethod
    def rest(cls, **kw):
        kw.setdefault("r_micro", R_MICRO_REST)
        return cls(regime="rest", **kw)

    @classmethod
    def hyperemic(cls, **kw):
        kw.setdefault("r_micro", R_MICRO_HYPEREMIC)
        return cls(regime="hyperemic", **kw)

    @property
    def p_inlet(self):
        return self.p_inlet_mmhg * MMHG_TO_DYN_CM2

    def viscosity(self, gamma):
        if self.carreau is None:
            return np.full_like(np.asarray(gamma, dtype=np.float64), self.mu_fixed)
        return self.carreau.viscosity(gamma)


def wall_shear_rate(q, r):
    """Poiseuille wall shear rate 4|Q| / (pi r^3), 1/s."""
    return 4.0 * np.abs(q) / (np.pi * np.asarray(r, dtype=np.float64) ** 3)


def _viscosity_profile(q, r, physio, tol=1e-8, max_iter=100):
    """Converged apparent viscosity at each radius sample.

    The wall shear rate closes directly from Q and r, so the fixed point
    settles immediately; the loop guards the contract that successive
    viscosity iterates agree to `tol` relative.
    """
    gamma = wall_shear_rate(q, r)
    mu = physio.viscosity(gamma)
    for _ in range(max_iter):
        mu_next = physio.viscosity(gamma)
        if np.max(np.abs(mu_next - mu) / np.abs(mu)) < tol:
            return mu_next
        mu = mu_next
    raise SolverError("viscosity fixed point failed to converge")


def _span_grid(branch, s0, s1, ds=0.005, min_nodes=33):
    n = max(min_nodes, int(np.ceil((s1 - s0) / ds)) + 1)
    return np.linspace(s0, s1, n)


def segment_resistance(branch, s0, s1, q, physio):
    """Integral of 8 mu / (pi r^4) over [s0, s1], dyn*s/cm^5."""
    if not 0.0 <= s0 < s1 <= branch.length + 1e-9:
        raise ValidationError(f"bad span [{s0}, {s1}] on branch {branch.branch_id!r}")
    s = _span_grid(branch, s0, s1)
    r = branch.radius_at(s)
    mu = _viscosity_profile(q, r, physio)
    integrand = 8.0 * mu / (np.pi * r ** 4)
    return float(np.trapezoid(integrand, s))


def stenosis_loss(stenosis, branch, q, physio):
    """Expansion pressure loss over one stenosis, dyn/cm^2 (signed with Q)."""
    s = np.linspace(stenosis.start_s, stenosis.end_s, 801)
    r = branch.radius_at(s)
    i_min = int(np.argmin(r))
    area_s = np.pi * r[i_min] ** 2
    area_0 = np.pi * branch.base_radius_at(s[i_min]) ** 2
    coeff = EXPANSION_COEFF * 0.5 * physio.rho * (1.0 / area_s - 1.0 / area_0) ** 2
    return float(coeff * q * abs(q))


# ---------------------------------------------------------------------------
# tree flow network

@dataclass
class FlowEdge:
    """A branch span carrying constant flow between junctions."""

    branch_id: str
    s0: float
    s1: float
    children: list = field(default_factory=list)  # indices into the edge list
    outlet_resistance: float | None = None
    flow: float = 0.0
    p_in: float = 0.0
    p_out: float = 0.0


@dataclass
class FlowSolution:
    """Converged flows and junction pressures for one tree and regime."""

    edges: list
    physio: "PhysioParams"
    residual: float
    iterations: int

    def edge_for(self, branch_id, s):
        for e in self.edges:
            if e.branch_id == branch_id and e.s0 - 1e-9 <= s <= e.s1 + 1e-9:
                return e
        raise ValidationError(f"no span covering s={s} on branch {branch_id!r}")

    def branch_flow(self, branch_id, s):
        return self.edge_for(branch_id, s).flow

    def outlets(self):
        return [e for e in self.edges if e.outlet_resistance is not None]


def _build_edges(tree):
    """Split branches at child attachments; DFS order from the root."""
    attach = {b.branch_id: [] for b in tree.branches}
    for b in tree.branches:
        if b.parent is not None:
            parent = tree.branch(b.parent)
            attach[b.parent].append((attachment_arclength(parent, b.points[0]), b.branch_id))
    spans = {}
    for b in tree.branches:
        cuts = sorted({round(s, 9) for s, _ in attach[b.branch_id]
                       if 1e-9 < s < b.length - 1e-9})
        bounds = [0.0] + cuts + [b.length]
        spans[b.branch_id] = list(zip(bounds[:-1], bounds[1:]))

    edges = []
    index = {}

    def add_branch(branch_id):
        first = None
        prev = None
        for s0, s1 in spans[branch_id]:
            e = FlowEdge(branch_id, s0, s1)
            edges.append(e)
            idx = len(edges) - 1
            index[(branch_id, s0)] = idx
            if first is None:
                first = idx
            if prev is not None:
                edges[prev].children.append(idx)
            prev = idx
        return first

    def walk(branch_id):
        first = add_branch(branch_id)
        for s_att, child_id in sorted(attach[branch_id], key=lambda t: (t[0], t[1])):
            child_first = walk(child_id)
            # attach to the span ending at s_att (branch end attaches to last span)
            host = None
            for (bid, _s0), idx in index.items():
                if bid == branch_id and abs(edges[idx].s1 - s_att) < 1e-6:
                    host = idx
            if host is None:
                raise ValidationError(
                    f"attachment at s={s_att} on {branch_id!r} missed every span boundary")
            edges[host].children.append(child_first)
        return first

    walk(tree.root)
    branch_map = {b.branch_id: b for b in tree.branches}
    for e in edges:
        if not e.children:
            e.outlet_resistance = 0.0  # placeholder, filled by Murray split below
    outs = [e for e in edges if e.outlet_resistance is not None]
    radii = np.array([branch_map[e.branch_id].base_radius_at(e.s1) for e in outs])
    return edges, outs, radii


def murray_outlet_resistances(radii, r_micro_total):
    """Per-outlet resistances R_i ~ r_i^-3 whose parallel sum is the total."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0):
        raise ValidationError("outlet radii must be positive")
    cubes = radii ** 3
    return r_micro_total * cubes.sum() / cubes


def _edge_stenoses(tree, edges):
    """Assign each stenosis to the span containing its midpoint."""
    per_edge = [[] for _ in edges]
    for b in tree.branches:
        for st in b.stenoses:
            mid = 0.5 * (st.start_s + st.end_s)
            for i, e in enumerate(edges):
                if e.branch_id == b.branch_id and e.s0 - 1e-9 <= mid <= e.s1 + 1e-9:
                    per_edge[i].append(st)
                    break
    return per_edge


def solve_tree_flow(tree, physio, tol=1e-10, max_iter=50):
    """Newton solve for outlet flows; residuals are pressure mismatches.

    Converged when max |residual| / p_inlet < tol.  Raises SolverError with
    the last residual vector when the iteration stalls.
    """
    edges, outs, out_radii = _build_edges(tree)
    resistances = murray_outlet_resistances(out_radii, physio.r_micro)
    for e, r in zip(outs, resistances):
        e.outlet_resistance = float(r)
    per_edge_sten = _edge_stenoses(tree, edges)
    branch_map = {b.branch_id: b for b in tree.branches}
    out_index = [edges.index(e) for e in outs]

    pos_of = {i: k for k, i in enumerate(out_index)}

    def subtree_flows(x):
        flows = np.zeros(len(edges))
        # accumulate bottom-up: reverse DFS order works because children
        # always come after their parent in the edge list
        for i in range(len(edges) - 1, -1, -1):
            e = edges[i]
            if e.outlet_resistance is not None:
                flows[i] = x[pos_of[i]]
            else:
                flows[i] = sum(flows[c] for c in e.children)
        return flows

    def residual(x):
        flows = subtree_flows(x)
        p = np.zeros(len(edges))
        p_out = np.zeros(len(edges))
        p[0] = physio.p_inlet
        for i, e in enumerate(edges):
            b = branch_map[e.branch_id]
            drop = segment_resistance(b, e.s0, e.s1, flows[i], physio) * flows[i]
            drop += sum(stenosis_loss(st, b, flows[i], physio)
                        for st in per_edge_sten[i])
            p_out[i] = p[i] - drop
            for c in e.children:
                p[c] = p_out[i]
        res = np.array([p_out[i] - x[k] * edges[i].outlet_resistance
                        for k, i in enumerate(out_index)])
        return res, flows, p, p_out

    # crude series estimate with a fixed viscosity for the starting point
    x = np.empty(len(outs))
    for k, e in enumerate(outs):
        series = 0.0
        b = branch_map[e.branch_id]
        series += 8.0 * 0.04 * b.length / (np.pi * float(np.min(b.base_radius)) ** 4)
        x[k] = physio.p_inlet / (e.outlet_resistance + series)

    res, flows, p, p_out = residual(x)
    best = np.max(np.abs(res))
    for iteration in range(1, max_iter + 1):
        if best / physio.p_inlet < tol:
            for i, e in enumerate(edges):
                e.flow = float(flows[i])
                e.p_in = float(p[i])
                e.p_out = float(p_out[i])
            return FlowSolution(edges=edges, physio=physio,
                                residual=float(best / physio.p_inlet),
                                iterations=iteration - 1)
        jac = np.empty((len(outs), len(outs)))
        for j in range(len(outs)):
            h = 1e-6 * max(abs(x[j]), 1e-3)
            xp = x.copy()
            xp[j] += h
            rp, _, _, _ = residual(xp)
            jac[:, j] = (rp - res) / h
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Jacobian at iteration {iteration}",
                              residuals=res) from exc
        alpha = 1.0
        for _ in range(12):
            trial = x + alpha * step
            res_t, flows_t, p_t, pout_t = residual(trial)
            if np.max(np.abs(res_t)) < best:
                x, res, flows, p, p_out = trial, res_t, flows_t, p_t, pout_t
                best = np.max(np.abs(res))
                break
            alpha *= 0.5
        else:
            raise SolverError(f"line search stalled at iteration {iteration}",
                              residuals=res)
    raise SolverError(f"no convergence after {max_iter} Newton iterations",
                      residuals=res)


# ---------------------------------------------------------------------------
# sampled fields

@dataclass
class HemoField:
    """Hemodynamic quantities sampled along every branch centerline."""

    branch_ids: list                 # branch id per tree order
    branch_index: np.ndarray         # (m,) index into branch_ids
    s: np.ndarray                    # (m,) arclength cm
    positions: np.ndarray            # (m,3) cm
    pressure: np.ndarray             # (m,) dyn/cm^2
    velocity: np.ndarray             # (m,) cm/s mean cross-sectional
    wss: np.ndarray                  # (m,) dyn/cm^2
    ffr: np.ndarray                  # (m,) P / P_inlet
    regime: str

    @property
    def pressure_mmhg(self):
        return self.pressure / MMHG_TO_DYN_CM2

    def branch_samples(self, branch_id):
        bi = self.branch_ids.index(branch_id)
        pick = self.branch_index == bi
        return pick

    def value_at(self, branch_id, s, channel="ffr"):
        """Channel value at the nearest centerline sample of a branch."""
        pick = self.branch_samples(branch_id)
        s_arr = self.s[pick]
        idx = int(np.argmin(np.abs(s_arr - s)))
        return float(getattr(self, channel)[pick][idx])

    def map_to_surface(self, surface):
        """Per-surface-point fields from the nearest centerline sample.

        Returns a dict of arrays; wall velocity is zero by the no-slip
        condition while `velocity` carries the mean cross-sectional value.
        """
        n = len(surface)
        out = {k: np.empty(n) for k in
               ("pressure_mmhg", "velocity_cm_s", "wss_dyn_cm2", "ffr")}
        out["wall_velocity_cm_s"] = np.zeros(n)
        pm = self.pressure_mmhg
        for bi, bid in enumerate(surface.branch_ids):
            pick = surface.branch_index == bi
            if not pick.any():
                continue
            fpick = self.branch_index == self.branch_ids.index(bid)
            s_arr = self.s[fpick]
            nearest = np.argmin(np.abs(surface.s[pick][:, None] - s_arr[None, :]), axis=1)
            out["pressure_mmhg"][pick] = pm[fpick][nearest]
            out["velocity_cm_s"][pick] = self.velocity[fpick][nearest]
            out["wss_dyn_cm2"][pick] = self.wss[fpick][nearest]
            out["ffr"][pick] = self.ffr[fpick][nearest]
        return out


def fields_along(tree, solution, ds=0.02):
    """Sample pressure/velocity/WSS/FFR every `ds` cm along each branch.

    Pressure decreases monotonically along the flow; stenosis losses ramp
    linearly across their extent.  The FFR column is P/P_inlet in both
    regimes; the regime tag says how to read it.
    """
    physio = solution.physio
    branch_ids = [b.branch_id for b in tree.branches]
    rows_bi, rows_s = [], []
    pos, pres, vel, wss_v = [], [], [], []
    for bi, b in enumerate(tree.branches):
        spans = sorted((e for e in solution.edges if e.branch_id == b.branch_id),
                       key=lambda e: e.s0)
        s_b = np.unique(np.concatenate([
            np.arange(0.0, b.length, ds), [b.length],
            [e.s0 for e in spans], [e.s1 for e in spans]]))
        p_b = np.empty_like(s_b)
        q_b = np.empty_like(s_b)
        for e in spans:
            inside = (s_b >= e.s0 - 1e-12) & (s_b <= e.s1 + 1e-12)
            s_fine = _span_grid(b, e.s0, e.s1, ds=min(ds / 2, 0.005))
            r_fine = b.radius_at(s_fine)
            mu = _viscosity_profile(e.flow, r_fine, physio)
            integrand = 8.0 * mu / (np.pi * r_fine ** 4) * e.flow
            cum = np.concatenate([[0.0], np.cumsum(
                0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s_fine))])
            visc = np.interp(s_b[inside], s_fine, cum)
            sten = np.zeros_like(visc)
            for st in b.stenoses:
                if e.s0 - 1e-9 <= 0.5 * (st.start_s + st.end_s) <= e.s1 + 1e-9:
                    loss = stenosis_loss(st, b, e.flow, physio)
                    frac = np.clip((s_b[inside] - st.start_s) / st.length, 0.0, 1.0)
                    sten += loss * frac
            p_b[inside] = e.p_in - visc - sten
            q_b[inside] = e.flow
        r_b = b.radius_at(s_b)
        gamma = wall_shear_rate(q_b, r_b)
        mu_b = physio.viscosity(gamma)
        rows_bi.append(np.full(len(s_b), bi))
        rows_s.append(s_b)
        pos.append(b.point_at(s_b))
        pres.append(p_b)
        vel.append(q_b / (np.pi * r_b ** 2))
        wss_v.append(mu_b * gamma)
    pressure = np.concatenate(pres)
    return HemoField(
        branch_ids=branch_ids,
        branch_index=np.concatenate(rows_bi).astype(np.int64),
        s=np.concatenate(rows_s),
        positions=np.concatenate(pos),
        pressure=pressure,
        velocity=np.concatenate(vel),
        wss=np.concatenate(wss_v),
        ffr=pressure / physio.p_inlet,
        regime=physio.regime,
    )


def simulate(tree, physio, ds=0.02):
    """Solve the tree and sample its fields in one call."""
    return fields_along(tree, solve_tree_flow(tree, physio), ds=ds)


FFR_RECORD_OFFSET = 2.0  # cm downstream of a stenosis end, clamped to the branch


def stenosis_record_points(tree):
    """(branch_id, stenosis, record arclength) per stenosis, for evaluation."""
    points = []
    for b in tree.branches:
        for st in b.stenoses:
            points.append((b.branch_id, st, min(st.end_s + FFR_RECORD_OFFSET, b.length)))
    return points


# ---------------------------------------------------------------------------
# CSV interchange

_CSV_COLUMNS = ("branch_id", "s_cm", "x_cm", "y_cm", "z_cm", "pressure_mmhg",
                "velocity_cm_s", "wss_dyn_cm2", "ffr", "regime")


def field_to_csv(path, field_data):
    """Deterministic CSV dump: branches in tree order, ascending arclength."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        pm = field_data.pressure_mmhg
        for i in range(len(field_data.s)):
            writer.writerow([
                field_data.branch_ids[field_data.branch_index[i]],
                repr(float(field_data.s[i])),
                repr(float(field_data.positions[i, 0])),
                repr(float(field_data.positions[i, 1])),
                repr(float(field_data.positions[i, 2])),
                repr(float(pm[i])),
                repr(float(field_data.velocity[i])),
                repr(float(field_data.wss[i])),
                repr(float(field_data.ffr[i])),
                field_data.regime,
            ])


def field_from_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        if tuple(header) != _CSV_COLUMNS:
            raise ValidationError(f"{path}: unexpected columns {header}")
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: empty field file")
    branch_ids = []
    for row in rows:
        if row[0] not in branch_ids:
            branch_ids.append(row[0])
    bi = np.array([branch_ids.index(r[0]) for r in rows], dtype=np.int64)
    num = np.array([[float(v) for v in r[1:9]] for r in rows])
    return HemoField(
        branch_ids=branch_ids,
        branch_index=bi,
        s=num[:, 0],
        positions=num[:, 1:4],
        pressure=num[:, 4] * MMHG_TO_DYN_CM2,
        velocity=num[:, 5],
        wss=num[:, 6],
        ffr=num[:, 7],
        regime=rows[0][9],
    )
