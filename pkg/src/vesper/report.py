"""Rendered run artifacts: CSV tables and matplotlib figures.

Everything lands in an output directory as plain files; callers get the
list of paths back. Figures are optional companions to the delimited
output, never the only record of a run.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .audio import EnergyProfile, Zone
from .downstream import MetricsReport
from .errors import ContractViolation, IOFailure
from .masking import MaskPlan

_ZONE_COLORS = {Zone.HIGH: "#d62728", Zone.LOW: "#ff9e4a", Zone.NOISE: "#9aa0a6"}


def read_log(path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read log {path}: {exc}") from exc
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise IOFailure(f"{path}:{i}: not valid JSON: {exc}") from exc
    return records


def write_step_csv(records: list[dict], path) -> Path:
    """Per-step loss table from a pretraining log."""
    steps = [r for r in records if r.get("event") == "step"]
    if not steps:
        raise ContractViolation("log has no step records")
    fields = ["epoch", "step", "lr", "l_l", "l_h", "l_x", "total"]
    if any("kd" in r for r in steps):
        fields.append("kd")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in steps:
            writer.writerow({k: r.get(k) for k in fields})
    return path


def write_epoch_csv(records: list[dict], path) -> Path:
    """Per-epoch table from a fine-tuning log."""
    epochs = [r for r in records if r.get("event") == "epoch"]
    if not epochs:
        raise ContractViolation("log has no epoch records")
    fields = sorted({k for r in epochs for k in r} - {"event"})
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in epochs:
            writer.writerow({k: r.get(k) for k in fields})
    return path


def loss_figure(records: list[dict], path) -> Path:
    steps = [r for r in records if r.get("event") == "step"]
    if not steps:
        raise ContractViolation("log has no step records")
    xs = list(range(len(steps)))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, [r["total"] for r in steps], label="total", lw=1.8)
    for key, style in (("l_l", "--"), ("l_h", ":"), ("l_x", "-.")):
        if any(r.get(key) for r in steps):
            ax.plot(xs, [r[key] for r in steps], style, label=key, lw=1.0)
    if any("kd" in r for r in steps):
        ax.plot(xs, [r.get("kd") for r in steps], "--", label="kd", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def lr_figure(records: list[dict], path) -> Path:
    pairs = {}
    for r in records:
        if "lr" in r and "epoch" in r:
            pairs[r["epoch"]] = r["lr"]
    if not pairs:
        raise ContractViolation("log has no learning-rate records")
    epochs = sorted(pairs)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(epochs, [pairs[e] for e in epochs], marker="o", ms=2.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def accuracy_figure(records: list[dict], path) -> Path:
    epochs = [r for r in records if r.get("event") == "epoch" and "eval_wa" in r]
    if not epochs:
        raise ContractViolation("log has no evaluation records")
    xs = [r["epoch"] for r in epochs]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("train_wa", "eval_wa", "eval_ua", "eval_wf1"):
        if any(key in r for r in epochs):
            ax.plot(xs, [r.get(key) for r in epochs], label=key, lw=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("metric")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def confusion_figure(report: MetricsReport, path) -> Path:
    conf = report.confusion
    labels = [c["label"] for c in report.per_class]
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            color = "white" if conf[i, j] > conf.max() / 2 else "black"
            ax.text(j, i, str(conf[i, j]), ha="center", va="center", color=color)
    fig.colorbar(im, shrink=0.8)
    title = f"WA {report.wa:.3f}  UA {report.ua:.3f}  WF1 {report.wf1:.3f}"
    if report.fold is not None:
        title = f"fold {report.fold}: " + title
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def mask_figure(profile: EnergyProfile, plan: MaskPlan, path) -> Path:
    """Normalized energy per frame, colored by zone, with mask spans shaded."""
    t = len(profile.normalized)
    fig, ax = plt.subplots(figsize=(8, 3.2))
    colors = [_ZONE_COLORS[z] for z in profile.zones]
    ax.bar(range(t), profile.normalized, width=1.0, color=colors, alpha=0.85)
    for i in plan.phoneme_indices:
        ax.axvspan(i - 0.5, i + 0.5, color="#1f77b4", alpha=0.18, lw=0)
    for i in plan.word_indices:
        ax.axvspan(i - 0.5, i + 0.5, color="#2ca02c", alpha=0.22, lw=0)
    for center in plan.phoneme_centers:
        ax.axvline(center, color="#1f77b4", lw=0.8, ls="--", alpha=0.7)
    ax.axhline(0.5, color="k", lw=0.6, ls=":")
    ax.axhline(0.2, color="k", lw=0.6, ls=":")
    ax.set_xlabel("frame")
    ax.set_ylabel("normalized energy")
    ax.set_xlim(-0.5, t - 0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def render_run_report(records: list[dict], out_dir, metrics: MetricsReport | None = None) -> list[Path]:
    """Everything the log supports: CSVs plus figures, into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    has_steps = any(r.get("event") == "step" for r in records)
    has_epochs = any(r.get("event") == "epoch" for r in records)
    if has_steps:
        written.append(write_step_csv(records, out_dir / "steps.csv"))
        written.append(loss_figure(records, out_dir / "losses.png"))
    if has_epochs:
        written.append(write_epoch_csv(records, out_dir / "epochs.csv"))
        written.append(lr_figure(records, out_dir / "lr.png"))
        if any("eval_wa" in r for r in records if r.get("event") == "epoch"):
            written.append(accuracy_figure(records, out_dir / "accuracy.png"))
    if metrics is not None:
        written.append(confusion_figure(metrics, out_dir / "confusion.png"))
    if not written:
        raise ContractViolation("log contains nothing to report on")
    return written
