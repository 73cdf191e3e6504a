"""Matplotlib figure rendering for training logs and metric reports.

Figures are side outputs written next to the delimited logs/CSVs; they never
feed back into computation.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_log(log_path: str | Path) -> tuple[list[dict], list[dict]]:
    steps, probes = [], []
    with open(log_path) as f:
        for line in f:
            rec = json.loads(line)
            if rec.get("event") == "probe":
                probes.append(rec)
            elif "step" in rec and "total" in rec and "event" not in rec:
                steps.append(rec)
    return steps, probes


def save_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    steps, probes = _read_log(log_path)
    if not steps:
        raise ValueError(f"no step records in {log_path}")
    terms = sorted(k for k in steps[0] if k not in ("step", "event"))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    xs = [r["step"] for r in steps]
    for term in terms:
        ax.plot(xs, [r[term] for r in steps], label=term, lw=1.2)
    if probes:
        ax.plot([r["step"] for r in probes], [r["total"] for r in probes],
                "k--", lw=1.0, label="probe total")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def save_metric_figures(report, out_dir: str | Path) -> list[Path]:
    """Per-frame metric curves and an aggregate summary bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    numeric = sorted({k for row in report.per_frame
                      for k, v in row.items() if isinstance(v, (int, float))})
    if numeric:
        fig, axes = plt.subplots(len(numeric), 1, figsize=(7, 1.8 * len(numeric)),
                                 sharex=True, squeeze=False)
        for ax, key in zip(axes[:, 0], numeric):
            ys = [row.get(key) for row in report.per_frame]
            ax.plot(range(len(ys)), ys, marker=".", lw=1.0)
            ax.set_ylabel(key)
            ax.grid(alpha=0.3)
        axes[-1, 0].set_xlabel("frame")
        fig.tight_layout()
        path = out / "per_frame_metrics.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if report.aggregates:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        names = sorted(report.aggregates)
        ax.bar(names, [report.aggregates[n] for n in names], color="#4878cf")
        for i, n in enumerate(names):
            ax.text(i, report.aggregates[n], f"{report.aggregates[n]:.3g}",
                    ha="center", va="bottom", fontsize=8)
        ax.set_ylabel("mean value")
        ax.set_title(f"aggregates over {report.frame_count} frames")
        fig.tight_layout()
        path = out / "aggregate_metrics.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
