"""Report emission: delimited metric tables, JSON summaries, and figures.

CSVs carry one leading comment line ("# bunkerops=<version> manifest=<hash>")
so every file names the run that produced it; readers here skip it. Floats
are written with ``repr`` so identical runs yield identical bytes. Figures
are rendered to PNG next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import __version__
from .harness import METRIC_FIELDS, AggregateReport, SweepResult

METHOD_LABELS = {"naive": "naive PPO", "cl": "PPO-CL", "cl_cm": "PPO-CL-CM"}
METHOD_COLORS = {"naive": "#999999", "cl": "#1f77b4", "cl_cm": "#ff7f0e"}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _open_csv(path, manifest_hash: str):
    f = open(path, "w", encoding="utf-8", newline="")
    f.write(f"# bunkerops={__version__} manifest={manifest_hash}\n")
    return f


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(rows))


def write_metrics_csv(path, reports: Sequence[AggregateReport], manifest_hash: str) -> None:
    """One row per (method, seed, rollout) with every episode metric."""
    with _open_csv(path, manifest_hash) as f:
        writer = csv.writer(f)
        writer.writerow(["method", "config", "seed", "rollout", *METRIC_FIELDS])
        for report in reports:
            for seed, rollout, em in report.rows:
                writer.writerow([
                    report.method, report.config_label, seed, rollout,
                    *[_fmt(getattr(em, m)) for m in METRIC_FIELDS],
                ])


def _json_safe(obj):
    """Strict JSON has no Infinity/NaN (peak ratios can be infinite when an
    episode never uses the lower peak); encode them as strings."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def write_summary_json(path, reports: Sequence[AggregateReport], manifest_hash: str,
                       extra: Optional[dict] = None) -> None:
    """Per-method aggregate summary mirroring the benchmark table layout:
    overall mean/std/CV% per metric plus best- and median-seed statistics."""
    data = {
        "version": __version__,
        "manifest": manifest_hash,
        "methods": {},
    }
    for report in reports:
        data["methods"][report.method] = {
            "config": report.config_label,
            "summary": report.summary,
            "best_seed": report.best_seed,
            "median_seed": report.median_seed,
            "best": {
                m: dict(zip(("mean", "std"), report.seed_stats(report.best_seed, m)))
                for m in report.summary
            },
            "median": {
                m: dict(zip(("mean", "std"), report.seed_stats(report.median_seed, m)))
                for m in report.summary
            },
        }
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(data), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def write_idle_volume_csv(path, reports: Sequence[AggregateReport], manifest_hash: str) -> None:
    """Plot-ready rows for the press-idle-time and throughput comparison."""
    with _open_csv(path, manifest_hash) as f:
        writer = csv.writer(f)
        writer.writerow(["method", "config", "idle_mean", "idle_std",
                         "volume_mean", "volume_std"])
        for r in reports:
            writer.writerow([
                r.method, r.config_label,
                _fmt(r.summary["press_idle_time"]["mean"]),
                _fmt(r.summary["press_idle_time"]["std"]),
                _fmt(r.summary["total_volume_processed"]["mean"]),
                _fmt(r.summary["total_volume_processed"]["std"]),
            ])


def write_safety_csv(path, reports: Sequence[AggregateReport], manifest_hash: str) -> None:
    with _open_csv(path, manifest_hash) as f:
        writer = csv.writer(f)
        writer.writerow(["method", "config", "safety_violations_mean", "safety_violations_std"])
        for r in reports:
            writer.writerow([
                r.method, r.config_label,
                _fmt(r.summary["safety_violations_pct"]["mean"]),
                _fmt(r.summary["safety_violations_pct"]["std"]),
            ])


def write_sweep_csv(path, sweep: SweepResult, manifest_hash: str) -> None:
    with _open_csv(path, manifest_hash) as f:
        writer = csv.writer(f)
        writer.writerow(["theta", "cv_pct", "collisions_mean", "collisions_std"])
        for row in sweep.rows:
            writer.writerow([_fmt(row["theta"]), _fmt(row["cv_pct"]),
                             _fmt(row["collisions_mean"]), _fmt(row["collisions_std"])])


# --- figures -----------------------------------------------------------------

def _bar_groups(ax, reports, metric, title, ylabel):
    labels = sorted({r.config_label for r in reports})
    methods = [m for m in ("naive", "cl", "cl_cm") if any(r.method == m for r in reports)]
    width = 0.8 / max(1, len(methods))
    for k, method in enumerate(methods):
        means, stds, xs = [], [], []
        for i, label in enumerate(labels):
            for r in reports:
                if r.method == method and r.config_label == label:
                    means.append(r.summary[metric]["mean"])
                    stds.append(r.summary[metric]["std"])
                    xs.append(i + (k - (len(methods) - 1) / 2) * width)
        ax.bar(xs, means, width=width * 0.95, yerr=stds, capsize=3,
               label=METHOD_LABELS.get(method, method),
               color=METHOD_COLORS.get(method))
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)


def render_method_comparison(path, reports: Sequence[AggregateReport]) -> None:
    """Two-panel bar chart: press idle time and total volume processed."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    _bar_groups(ax1, reports, "press_idle_time", "Press idle time", "timesteps")
    _bar_groups(ax2, reports, "total_volume_processed", "Total volume processed",
                "volume units")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_safety(path, reports: Sequence[AggregateReport]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    _bar_groups(ax, reports, "safety_violations_pct", "Safety-limit violations",
                "% of empties")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep(path, sweep: SweepResult, config_label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    thetas = [row["theta"] for row in sweep.rows]
    cvs = [row["cv_pct"] for row in sweep.rows]
    ax.plot(thetas, cvs, marker="o", color=METHOD_COLORS["cl_cm"])
    ax.axvline(sweep.best_theta, color="#555555", linestyle="--", linewidth=1,
               label=f"best theta = {sweep.best_theta:g}")
    ax.set_xlabel("collision probability threshold")
    ax.set_ylabel("CV% of collision timesteps")
    title = "Collision stability across thresholds"
    if config_label:
        title += f" ({config_label})"
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
