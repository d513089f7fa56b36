"""Report rendering: every report path writes machine-readable delimited output
(JSON + CSV) and matplotlib figures side by side."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

LOSS_FIELDS = (
    "total",
    "time",
    "mel_l1",
    "mel_l2",
    "adversarial",
    "feature_matching",
    "commitment",
    "distill",
    "discriminator",
)


def read_training_log(path) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


def render_training_curves(records, out_path) -> Path:
    """Per-component loss curves on a log scale, one PNG."""
    out_path = Path(out_path)
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 5))
    for field in LOSS_FIELDS:
        values = [r[field] for r in records if field in r]
        if values:
            ax.plot(steps[: len(values)], values, label=field, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def render_eval_report(report: dict, out_dir) -> dict:
    """Write the evaluation report: JSON + per-item CSV + summary figures.

    Returns a map of artifact names to paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}

    report_path = out_dir / "eval_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    artifacts["report"] = report_path

    items = report.get("items", [])
    if items:
        artifacts["items_csv"] = write_csv(items, out_dir / "eval_items.csv")

    snmi_values = report.get("snmi")
    if snmi_values:
        fig, ax = plt.subplots(figsize=(7, 4))
        names = list(snmi_values.keys())
        ax.bar(names, [snmi_values[n] for n in names], color="steelblue")
        ax.set_ylabel("SNMI")
        ax.set_ylim(0, 1.05)
        ax.tick_params(axis="x", rotation=45)
        ax.set_title("sequence-identity mutual information per stream")
        fig.tight_layout()
        fig_path = out_dir / "snmi_per_stream.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        artifacts["snmi_figure"] = fig_path

    si_values = [item["si_snr"] for item in items if "si_snr" in item]
    if si_values:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(si_values, bins=min(20, max(5, len(si_values) // 2)), color="darkseagreen")
        ax.set_xlabel("SI-SNR (dB)")
        ax.set_ylabel("clips")
        ax.set_title("reconstruction SI-SNR")
        fig.tight_layout()
        fig_path = out_dir / "si_snr_hist.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        artifacts["si_snr_figure"] = fig_path

    return artifacts


def render_kl_report(report: dict, out_dir) -> dict:
    """Write the Gaussian-KL diagnostic: JSON + CSV + comparison figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}

    report_path = out_dir / "kl_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    artifacts["report"] = report_path

    row = {k: report[k] for k in ("kl_feature", "kl_recon", "teacher_sigma", "student_sigma", "d")}
    artifacts["csv"] = write_csv([row], out_dir / "kl_report.csv")

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].bar(["feature", "recon"], [report["kl_feature"], report["kl_recon"]], color=["indianred", "steelblue"])
    axes[0].set_ylabel("KL divergence (nats)")
    axes[0].set_title("distillation-side KL")
    axes[1].bar(["teacher", "student"], [report["teacher_sigma"], report["student_sigma"]], color="gray")
    axes[1].set_ylabel("isotropic variance")
    axes[1].set_title("fitted variances")
    fig.tight_layout()
    fig_path = out_dir / "kl_comparison.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    artifacts["figure"] = fig_path
    return artifacts
