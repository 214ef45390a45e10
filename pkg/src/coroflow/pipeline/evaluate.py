"""Evaluation metrics and the case-level agreement protocol.

The headline accuracy number is the normalized mean absolute error (NMAE)
of FFR over all pooled test points; the per-branch table pools each named
branch across cases and averages the branch values into a vessel-level
figure.  Downstream agreement pairs the oracle and predicted FFR at the
recording point 2 cm past each stenosis (clamped to the branch end) and
feeds Pearson correlation with a two-sided p-value, Bland-Altman limits of
agreement, and ischemia classification at the FFR < 0.8 cutoff.

The p-value uses the exact t-distribution tail computed from the
regularized incomplete beta function, so the module has no statistics
dependencies beyond numpy.
"""

from __future__ import annotations

import math
import time

import numpy as np

from ..errors import ValidationError
from ..oracle import stenosis_record_points

FFR_THRESHOLD = 0.8
FFR_CHANNEL = 3      # column order: pressure, velocity, wss, ffr


def nmae(pred, truth):
    """Mean absolute error normalized by the spread of the true values.

    The normalizer is max - min of `truth`; a constant truth vector has no
    spread and raises.
    """
    p_hat = np.asarray(pred, dtype=np.float64).ravel()
    p = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != p_hat.shape:
        raise ValidationError(
            f"nmae length mismatch: {p_hat.shape} predictions vs {p.shape} truths")
    if len(p) < 2:
        raise ValidationError("nmae needs at least two values")
    span = float(p.max() - p.min())
    if span == 0.0:
        raise ValidationError("nmae undefined: truth values are constant")
    return float(np.mean(np.abs(p - p_hat)) / span)


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta, by Lentz's method."""
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        for aa in (m * (b - m) * x / ((qam + m2) * (a + m2)),
                   -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + aa * d
            if abs(d) < tiny:
                d = tiny
            c = 1.0 + aa / c
            if abs(c) < tiny:
                c = tiny
            d = 1.0 / d
            h *= d * c
        if abs(d * c - 1.0) < 1e-12:
            break
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"incomplete beta argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    front = math.exp(a * math.log(x) + b * math.log1p(-x)
                     + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b))
    # the continued fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def pearson(x, y):
    """Pearson correlation coefficient and its two-sided p-value.

    The p-value comes from the exact null distribution via the t statistic
    t = r sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 3:
        raise ValidationError("pearson needs two equal-length vectors of >= 3 values")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise ValidationError("pearson undefined for a constant input")
    r = float(np.clip(float(xc @ yc) / denom, -1.0, 1.0))
    df = len(x) - 2
    if abs(r) == 1.0:
        return r, 0.0
    t_sq = r * r * df / (1.0 - r * r)
    p = betainc_reg(0.5 * df, 0.5, df / (df + t_sq))
    return r, float(p)


def bland_altman(pred, truth):
    """Mean difference and 95% limits of agreement (mean +/- 1.96 sd)."""
    p_hat = np.asarray(pred, dtype=np.float64).ravel()
    p = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != p_hat.shape or len(p) < 2:
        raise ValidationError("bland_altman needs two equal-length vectors of >= 2 values")
    diff = p_hat - p
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    return {
        "n": int(len(diff)),
        "mean_difference": mean,
        "sd_difference": sd,
        "loa_lower": mean - 1.96 * sd,
        "loa_upper": mean + 1.96 * sd,
    }


def classification_stats(pred, truth, threshold=FFR_THRESHOLD):
    """Ischemia confusion statistics with `value < threshold` as positive."""
    p_hat = np.asarray(pred, dtype=np.float64).ravel()
    p = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != p_hat.shape or len(p) == 0:
        raise ValidationError("classification needs two equal-length nonempty vectors")
    pos_pred = p_hat < threshold
    pos_true = p < threshold
    tp = int(np.sum(pos_pred & pos_true))
    tn = int(np.sum(~pos_pred & ~pos_true))
    fp = int(np.sum(pos_pred & ~pos_true))
    fn = int(np.sum(~pos_pred & pos_true))
    out = {
        "threshold": float(threshold),
        "tp": tp, "tn": tn, "fp": fp, "fn": fn,
        "accuracy": (tp + tn) / len(p),
        "sensitivity": tp / (tp + fn) if tp + fn else None,
        "specificity": tn / (tn + fp) if tn + fp else None,
    }
    return out


def _record_position(tree, branch_id, s):
    """World position at arclength s along a branch centerline."""
    b = tree.branch(branch_id)
    s = float(np.clip(s, 0.0, b.length))
    return np.array([np.interp(s, b.arclength, b.points[:, k]) for k in range(3)])


def downstream_pairs(case, positions, pred_ffr, truth_ffr, regime="hyperemic"):
    """(truth, predicted) FFR at each stenosis recording point of a case.

    Both values are read at the cloud point nearest the recording position
    so the pair compares like with like; the truth channel carries the
    oracle value attached to that point.
    """
    pairs = []
    for branch_id, _, s_rec in stenosis_record_points(case.tree):
        target = _record_position(case.tree, branch_id, s_rec)
        idx = int(np.argmin(np.sum((positions - target) ** 2, axis=1)))
        pairs.append((float(truth_ffr[idx]), float(pred_ffr[idx])))
    return pairs


def evaluate_cases(cases, predict_fn, regime="hyperemic",
                   threshold=FFR_THRESHOLD, workers=1):
    """Aggregate agreement metrics over a list of loaded cases.

    `predict_fn(case)` must return {regime: (pred (n, 4) physical units,
    PointBatch)}.  With `workers` > 1 predictions run on a thread pool;
    the metric reduction always follows the case order, so the result is
    identical for any worker count.  Returns a plain dict (JSON-ready)
    with pooled and per-branch FFR NMAE, downstream-pair statistics, and
    per-case wall clock.
    """
    if not cases:
        raise ValidationError("evaluation needs a nonempty case list")

    def timed(case):
        start = time.perf_counter()
        out = predict_fn(case)
        return out, time.perf_counter() - start

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(timed, cases))
    else:
        results = [timed(case) for case in cases]

    pooled_pred, pooled_truth = [], []
    by_branch = {}
    per_case = {}
    timing = {}
    pairs = []
    for case, (pred_map, elapsed) in zip(cases, results):
        timing[case.case_id] = elapsed
        pred, batch = pred_map[regime]
        pred_ffr = np.asarray(pred)[:, FFR_CHANNEL]
        true_ffr = batch.truth[:, FFR_CHANNEL]
        pooled_pred.append(pred_ffr)
        pooled_truth.append(true_ffr)
        for name in np.unique(batch.branch_ids):
            pick = batch.branch_ids == name
            by_branch.setdefault(str(name), [[], []])
            by_branch[str(name)][0].append(pred_ffr[pick])
            by_branch[str(name)][1].append(true_ffr[pick])
        per_case[case.case_id] = _safe_nmae(pred_ffr, true_ffr)
        pairs.extend(downstream_pairs(case, batch.positions, pred_ffr,
                                      true_ffr, regime))
    pooled_pred = np.concatenate(pooled_pred)
    pooled_truth = np.concatenate(pooled_truth)
    branch_nmae = {
        name: _safe_nmae(np.concatenate(p), np.concatenate(t))
        for name, (p, t) in sorted(by_branch.items())
    }
    valid = [v for v in branch_nmae.values() if v is not None]
    times = np.array(list(timing.values()))
    metrics = {
        "regime": regime,
        "n_cases": len(cases),
        "n_points": int(len(pooled_truth)),
        "ffr_nmae_overall": nmae(pooled_pred, pooled_truth),
        "ffr_nmae_per_branch": branch_nmae,
        "ffr_nmae_vessel_mean": float(np.mean(valid)) if valid else None,
        "ffr_nmae_per_case": per_case,
        "downstream": _pair_stats(pairs, threshold),
        "timing_s": {"mean": float(times.mean()), "max": float(times.max()),
                     "per_case": timing},
    }
    return metrics


def _safe_nmae(pred, truth):
    try:
        return nmae(pred, truth)
    except ValidationError:
        return None


def _pair_stats(pairs, threshold):
    if not pairs:
        return {"n_pairs": 0}
    arr = np.asarray(pairs, dtype=np.float64)
    truth, pred = arr[:, 0], arr[:, 1]
    out = {"n_pairs": int(len(arr)), "pairs": [[t, p] for t, p in pairs]}
    if len(arr) >= 3:
        try:
            r, p_value = pearson(truth, pred)
            out["pearson_r"] = r
            out["p_value"] = p_value
        except ValidationError:
            out["pearson_r"] = None
            out["p_value"] = None
    out["bland_altman"] = bland_altman(pred, truth) if len(arr) >= 2 else None
    out["classification"] = classification_stats(pred, truth, threshold)
    return out


def case_point_table(case, batch, pred, regime="hyperemic"):
    """Per-point rows (position, branch, arclength, truth/pred channels).

    Arclength comes from the surface sample nearest each cloud point, the
    same lookup that attached the truth values.
    """
    from scipy.spatial import cKDTree

    surf_pos = case.surface_positions(regime)
    _, nearest = cKDTree(surf_pos).query(batch.positions)
    s = np.asarray(case.surfaces[regime]["s_cm"], dtype=np.float64)[nearest]
    branch = np.asarray(case.surfaces[regime]["branch_id"],
                        dtype=object)[nearest]
    pred = np.asarray(pred)
    names = ("pressure", "velocity", "wss", "ffr")
    rows = []
    for i in range(len(batch.positions)):
        row = {"x_cm": repr(float(batch.positions[i, 0])),
               "y_cm": repr(float(batch.positions[i, 1])),
               "z_cm": repr(float(batch.positions[i, 2])),
               "branch": str(branch[i]),
               "s": repr(float(s[i]))}
        for c, name in enumerate(names):
            row[f"{name}_true"] = repr(float(batch.truth[i, c]))
            row[f"{name}_pred"] = repr(float(pred[i, c]))
        rows.append(row)
    return rows


def write_results(out_dir, metrics, point_tables=None):
    """Persist metrics JSON and optional per-case point CSVs.

    Output bytes are deterministic for identical inputs: JSON keys are
    sorted and floats are written with repr.
    """
    import csv
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, "metrics.json")]
    with open(paths[0], "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if point_tables:
        points_dir = os.path.join(out_dir, "points")
        os.makedirs(points_dir, exist_ok=True)
        for case_id, rows in sorted(point_tables.items()):
            path = os.path.join(points_dir, f"{case_id}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)
            paths.append(path)
    return paths


def oracle_predictor(case, n_points=2048, dtype=np.float64):
    """Self-consistency predictor: the attached oracle values themselves.

    Builds the cloud from the ground-truth mask (network bypass) and
    returns the truth as the prediction, exercising the full metric stack
    with known-perfect agreement.
    """
    from ..oracle import PhysioParams
    from ..pointnet import conditioning_vector
    from .cloud import build_whole_cloud, cloud_to_batch

    build = build_whole_cloud(case, None, None, None, None,
                              n_points=n_points, dtype=dtype,
                              oracle_mask=True)
    physio = {"rest": PhysioParams.rest(), "hyperemic": PhysioParams.hyperemic()}
    out = {}
    for regime, params in physio.items():
        batch = cloud_to_batch(build, case, regime, conditioning_vector(params))
        out[regime] = (batch.truth.copy(), batch)
    return out
