"""Rendering of evaluation results into SVG plots and CSV tables.

Works purely from the files an evaluation run leaves behind (metrics
JSON, per-case point tables, optional training log), so plots can be
regenerated without touching the dataset or the networks.  SVG output
is byte-deterministic: a fixed hash salt replaces matplotlib's
process-dependent element ids and the creation date is stripped.
"""

from __future__ import annotations

import csv
import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from ..errors import ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

SVG_SALT = "coroflow"

CHANNEL_COLUMNS = ("pressure", "velocity", "wss", "ffr")


def _new_figure(width=4.8, height=3.6):
    plt.rcParams["svg.hashsalt"] = SVG_SALT
    return plt.figure(figsize=(width, height), dpi=100)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def save_scatter(pairs, path, r=None, p=None):
    """Oracle vs predicted downstream FFR with the identity line."""
    truth = [a for a, _ in pairs]
    pred = [b for _, b in pairs]
    fig = _new_figure(4.2, 4.2)
    ax = fig.add_subplot(111)
    lo = min(truth + pred + [0.6])
    hi = max(truth + pred + [1.0])
    pad = 0.02 * (hi - lo + 1e-9)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad],
            color="0.6", lw=1.0, label="identity")
    ax.plot(truth, pred, "o", ms=4, color="tab:blue", alpha=0.8)
    ax.set_xlabel("oracle downstream FFR")
    ax.set_ylabel("predicted downstream FFR")
    title = f"n = {len(pairs)}"
    if r is not None:
        title += f", r = {r:.3f}"
        title += ", p < 0.001" if p is not None and p < 1e-3 else (
            f", p = {p:.3f}" if p is not None else "")
    ax.set_title(title)
    ax.legend(loc="upper left", frameon=False)
    return _save(fig, path)


def save_bland_altman(pairs, path, stats=None):
    """Agreement plot: mean of the pair vs predicted minus oracle."""
    means = [(a + b) / 2.0 for a, b in pairs]
    diffs = [b - a for a, b in pairs]
    fig = _new_figure(4.8, 3.6)
    ax = fig.add_subplot(111)
    ax.plot(means, diffs, "o", ms=4, color="tab:blue", alpha=0.8)
    if stats is not None:
        ax.axhline(stats["mean_difference"], color="tab:red", lw=1.2,
                   label=f"mean {stats['mean_difference']:+.4f}")
        for key in ("loa_lower", "loa_upper"):
            ax.axhline(stats[key], color="0.5", lw=1.0, ls="--")
        ax.legend(loc="upper right", frameon=False)
    ax.set_xlabel("mean of oracle and predicted FFR")
    ax.set_ylabel("predicted - oracle")
    ax.set_title("Bland-Altman, downstream FFR")
    return _save(fig, path)


def save_ffr_curve(rows, path, case_id):
    """FFR against centerline arclength for one case, per branch."""
    branches = sorted({row["branch"] for row in rows})
    fig = _new_figure(5.4, 3.6)
    ax = fig.add_subplot(111)
    cmap = plt.get_cmap("tab10")
    for bi, branch in enumerate(branches):
        pts = sorted((float(r["s"]), float(r["ffr_true"]), float(r["ffr_pred"]))
                     for r in rows if r["branch"] == branch)
        s = [p[0] for p in pts]
        color = cmap(bi % 10)
        ax.plot(s, [p[1] for p in pts], "-", lw=1.2, color=color, label=branch)
        ax.plot(s, [p[2] for p in pts], ".", ms=3, color=color, alpha=0.6)
    ax.set_xlabel("arclength (cm)")
    ax.set_ylabel("FFR")
    ax.set_title(f"{case_id}: oracle (lines) vs predicted (dots)")
    ax.legend(loc="lower left", frameon=False, fontsize=7, ncol=2)
    return _save(fig, path)


def save_loss_curve(log_rows, path):
    """Total loss per iteration with the probe metric when present."""
    its = [int(r["iteration"]) for r in log_rows]
    total = [float(r["total"]) for r in log_rows]
    fig = _new_figure(5.4, 3.6)
    ax = fig.add_subplot(111)
    ax.plot(its, total, lw=0.9, color="tab:blue", label="total loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    probes = [(int(r["iteration"]), float(r["probe_nmae"])) for r in log_rows
              if r.get("probe_nmae") not in (None, "", "inf")]
    if probes:
        ax2 = ax.twinx()
        ax2.plot([p[0] for p in probes], [p[1] for p in probes],
                 "o-", ms=3, lw=0.8, color="tab:red", label="probe NMAE")
        ax2.set_ylabel("probe FFR NMAE")
    ax.set_title("training loss")
    ax.legend(loc="upper right", frameon=False)
    return _save(fig, path)


def write_summary_csv(metrics, path):
    """Flat metric table: one row per named quantity."""
    rows = [("regime", metrics["regime"]),
            ("cases", metrics["n_cases"]),
            ("points", metrics["n_points"]),
            ("ffr_nmae_overall", metrics["ffr_nmae_overall"]),
            ("ffr_nmae_vessel_mean", metrics["ffr_nmae_vessel_mean"])]
    for branch in sorted(metrics["ffr_nmae_per_branch"]):
        rows.append((f"ffr_nmae_branch_{branch}",
                     metrics["ffr_nmae_per_branch"][branch]))
    down = metrics.get("downstream") or {}
    if down.get("n_pairs"):
        rows.append(("downstream_pairs", down["n_pairs"]))
        if down.get("pearson_r") is not None:
            rows += [("pearson_r", down["pearson_r"]),
                     ("p_value", down["p_value"])]
        ba = down.get("bland_altman")
        if ba:
            rows += [("bland_altman_mean", ba["mean_difference"]),
                     ("bland_altman_loa_lower", ba["loa_lower"]),
                     ("bland_altman_loa_upper", ba["loa_upper"])]
        cls = down.get("classification") or {}
        for key in ("accuracy", "sensitivity", "specificity"):
            if cls.get(key) is not None:
                rows.append((f"classification_{key}", cls[key]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    return path


def load_point_table(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def render_report(results_dir, out_dir=None):
    """Render every plot the results directory supports; return paths."""
    metrics_path = os.path.join(results_dir, "metrics.json")
    if not os.path.exists(metrics_path):
        raise ValidationError(f"no metrics.json under {results_dir}")
    with open(metrics_path, "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    out_dir = out_dir or results_dir
    os.makedirs(out_dir, exist_ok=True)
    written = [write_summary_csv(metrics, os.path.join(out_dir, "summary.csv"))]

    down = metrics.get("downstream") or {}
    pairs = [tuple(p) for p in down.get("pairs", [])]
    if pairs:
        written.append(save_scatter(
            pairs, os.path.join(out_dir, "scatter.svg"),
            r=down.get("pearson_r"), p=down.get("p_value")))
        written.append(save_bland_altman(
            pairs, os.path.join(out_dir, "bland_altman.svg"),
            stats=down.get("bland_altman")))

    points_dir = os.path.join(results_dir, "points")
    if os.path.isdir(points_dir):
        for name in sorted(os.listdir(points_dir)):
            if not name.endswith(".csv"):
                continue
            case_id = name[:-4]
            rows = load_point_table(os.path.join(points_dir, name))
            written.append(save_ffr_curve(
                rows, os.path.join(out_dir, f"ffr_{case_id}.svg"), case_id))

    log_path = os.path.join(results_dir, "training_log.csv")
    if os.path.exists(log_path):
        with open(log_path, "r", encoding="utf-8", newline="") as fh:
            log_rows = list(csv.DictReader(fh))
        if log_rows:
            written.append(save_loss_curve(
                log_rows, os.path.join(out_dir, "loss_curve.svg")))

    logger.info("report: wrote %d files to %s", len(written), out_dir)
    return written
