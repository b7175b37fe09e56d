"""Report rendering: CSV tables plus matplotlib figures written next to them.

Every CLI workflow that produces numbers also drops a figure: training writes
the loss curve, evaluation a per-class AP chart and score histogram, transfer
a regime comparison, pseudo-labeling a confidence histogram.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalResult


def save_loss_curve(curve: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [e["step"] for e in curve]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.plot(steps, [e["total"] for e in curve], label="total", lw=1.0)
    ax1.plot(steps, [e["cls"] for e in curve], label="cls", lw=0.8, alpha=0.7)
    ax1.plot(steps, [e["loc"] for e in curve], label="loc", lw=0.8, alpha=0.7)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax2.plot(steps, [e["lr"] for e in curve], color="tab:gray", lw=1.0)
    ax2.set_yscale("log")
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_report(
    result: EvalResult,
    out_dir: str | Path,
    prefix: str = "eval",
    score_samples: Sequence[float] | None = None,
) -> dict[str, Path]:
    """CSV of per-class AP plus a bar chart; optional detection-score histogram."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{prefix}_results.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap", "ap50"])
        for cls in sorted(result.per_class_ap):
            writer.writerow(
                [cls, f"{result.per_class_ap[cls]:.6f}", f"{result.per_class_ap50.get(cls, float('nan')):.6f}"]
            )
        writer.writerow(["__mean__", f"{result.ap:.6f}", f"{result.ap50:.6f}"])
    json_path = out_dir / f"{prefix}_results.json"
    json_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")

    classes = sorted(result.per_class_ap)
    fig, axes = plt.subplots(
        1, 2 if score_samples is not None else 1,
        figsize=(max(6, 0.5 * len(classes) + 3), 3.5),
        squeeze=False,
    )
    ax = axes[0][0]
    xs = np.arange(len(classes))
    ax.bar(xs - 0.2, [result.per_class_ap[c] for c in classes], width=0.4, label="AP")
    ax.bar(xs + 0.2, [result.per_class_ap50.get(c, 0.0) for c in classes], width=0.4, label="AP50")
    ax.set_xticks(xs)
    ax.set_xticklabels(classes, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.axhline(result.ap, color="tab:blue", ls="--", lw=0.7)
    ax.legend(frameon=False, fontsize=8)
    ax.set_title(f"AP {result.ap:.3f} / AP50 {result.ap50:.3f}", fontsize=9)
    if score_samples is not None:
        ax2 = axes[0][1]
        ax2.hist(score_samples, bins=40, range=(0, 1), color="tab:gray")
        ax2.set_xlabel("detection score")
        ax2.set_title("score distribution", fontsize=9)
    fig.tight_layout()
    fig_path = out_dir / f"{prefix}_per_class.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "json": json_path, "figure": fig_path}


TRANSFER_COLUMNS = ["task", "regime", "shots", "seed", "ap", "ap50", "per_class_ap"]


def write_transfer_results(rows: Sequence[dict], path: str | Path) -> Path:
    """Long-form CSV: one row per (task, regime, shots, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRANSFER_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            if isinstance(out.get("per_class_ap"), dict):
                out["per_class_ap"] = "|".join(
                    f"{k}:{v:.4f}" for k, v in sorted(out["per_class_ap"].items())
                )
            writer.writerow(out)
    return path


def save_transfer_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Mean AP per regime with min-max whiskers across seeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    regimes = sorted({r["regime"] for r in rows})
    means, spans = [], []
    for regime in regimes:
        aps = [r["ap"] for r in rows if r["regime"] == regime]
        means.append(float(np.mean(aps)))
        spans.append((float(np.min(aps)), float(np.max(aps))))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(regimes))
    ax.bar(xs, means, width=0.6, color="tab:blue", alpha=0.8)
    for x, (lo, hi) in zip(xs, spans):
        ax.plot([x, x], [lo, hi], color="black", lw=1.2)
    ax.set_xticks(xs)
    ax.set_xticklabels(regimes, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confidence_histogram(confidences: Sequence[float], path: str | Path, threshold: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(confidences, bins=40, range=(0, 1), color="tab:green", alpha=0.8)
    ax.axvline(threshold, color="tab:red", ls="--", lw=1.0, label=f"threshold {threshold}")
    ax.set_xlabel("pseudo-box confidence")
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def append_loss_log(entry: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry) + "\n")
