"""CSV and plot emission for campaigns.

CSV layout is fully deterministic for a given (config digest, seed):
one comment line carrying both, a header, then fixed-format rows.

Stability columns: timestamp, skr_bps, qber, visibility_dcc,
detections_total.  Sweep columns: added_db, skr_bps_mean, skr_bps_std,
qber_mean, qber_std, skr_bps_predicted, aborted_fraction.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .campaign import CampaignSummary, LinkMetrics, SweepRow

__all__ = [
    "metrics_to_csv",
    "sweep_to_csv",
    "emit_stability_outputs",
    "emit_sweep_outputs",
]

STABILITY_HEADER = "timestamp,skr_bps,qber,visibility_dcc,detections_total"
SWEEP_HEADER = (
    "added_db,skr_bps_mean,skr_bps_std,qber_mean,qber_std,skr_bps_predicted,aborted_fraction"
)


def metrics_to_csv(metrics: list[LinkMetrics], digest: str, seed: int) -> str:
    if not metrics:
        raise ValueError("no metrics to emit")
    lines = [f"# config_digest={digest} seed={seed}", STABILITY_HEADER]
    for m in metrics:
        lines.append(
            f"{m.timestamp:.3f},{m.skr_bps:.6f},{m.qber:.8f},"
            f"{m.visibility_dcc:.8f},{m.detections_total}"
        )
    return "\n".join(lines) + "\n"


def sweep_to_csv(rows: list[SweepRow], digest: str, seed: int) -> str:
    if not rows:
        raise ValueError("no sweep rows to emit")
    lines = [f"# config_digest={digest} seed={seed}", SWEEP_HEADER]
    for r in rows:
        lines.append(
            f"{r.added_db:.3f},{r.skr_bps_mean:.6f},{r.skr_bps_std:.6f},"
            f"{r.qber_mean:.8f},{r.qber_std:.8f},{r.skr_bps_predicted:.6f},"
            f"{r.aborted_fraction:.6f}"
        )
    return "\n".join(lines) + "\n"


def _ensure_dir(out_dir: str | Path) -> Path:
    path = Path(out_dir)
    os.makedirs(path, exist_ok=True)
    return path


def emit_stability_outputs(
    metrics: list[LinkMetrics],
    summary: CampaignSummary,
    out_dir: str | Path,
    seed: int,
) -> dict[str, Path]:
    """Write stability CSV plus one plot per monitored metric."""
    if not metrics:
        raise ValueError("no metrics to emit")
    path = _ensure_dir(out_dir)
    csv_path = path / "stability.csv"
    csv_path.write_text(metrics_to_csv(metrics, summary.config_digest, seed), encoding="utf-8")

    times = [m.timestamp for m in metrics]
    panels = [
        ("skr_bps", "SKR (bps)", [m.skr_bps for m in metrics]),
        ("qber", "QBER", [m.qber for m in metrics]),
        ("visibility_dcc", "Dcc visibility", [m.visibility_dcc for m in metrics]),
        ("detections_per_s", "Detections per second",
         [m.detections_total / summary.interval_s for m in metrics]),
    ]
    out = {"csv": csv_path}
    for key, label, values in panels:
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.plot(times, values, lw=0.7)
        ax.axhline(summary.mean[key], color="red", ls=":", lw=1.2,
                   label=f"mean {summary.mean[key]:.4g}")
        ax.set_xlabel("simulated time (s)")
        ax.set_ylabel(label)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        plot_path = path / f"stability_{key}.png"
        fig.savefig(plot_path, dpi=110)
        plt.close(fig)
        out[key] = plot_path
    return out


def emit_sweep_outputs(rows: list[SweepRow], out_dir: str | Path, digest: str, seed: int) -> dict[str, Path]:
    """Write sweep CSV plus a log-scaled SKR plot with error bars."""
    if not rows:
        raise ValueError("no sweep rows to emit")
    path = _ensure_dir(out_dir)
    csv_path = path / "sweep.csv"
    csv_path.write_text(sweep_to_csv(rows, digest, seed), encoding="utf-8")

    added = [r.added_db for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    positive = [r for r in rows if r.skr_bps_mean > 0]
    ax1.errorbar(
        [r.added_db for r in positive],
        [r.skr_bps_mean for r in positive],
        yerr=[r.skr_bps_std for r in positive],
        fmt="o-",
        capsize=3,
        label="simulated",
    )
    pred_pos = [(r.added_db, r.skr_bps_predicted) for r in rows if r.skr_bps_predicted > 0]
    if pred_pos:
        ax1.plot(*zip(*pred_pos), "s--", alpha=0.6, label="analytic")
    ax1.set_yscale("log")
    ax1.set_xlabel("added attenuation (dB)")
    ax1.set_ylabel("SKR (bps)")
    ax1.legend(fontsize=8)
    ax2.errorbar(added, [r.qber_mean for r in rows], yerr=[r.qber_std for r in rows],
                 fmt="o-", capsize=3, color="tab:orange")
    ax2.set_xlabel("added attenuation (dB)")
    ax2.set_ylabel("QBER")
    fig.tight_layout()
    plot_path = path / "sweep_skr.png"
    fig.savefig(plot_path, dpi=110)
    plt.close(fig)
    return {"csv": csv_path, "plot": plot_path}
