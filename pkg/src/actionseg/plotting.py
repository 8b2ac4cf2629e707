"""Figures for run logs and evaluation reports (matplotlib, headless)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ("loss_total", "loss_sup", "loss_distill", "loss_pl", "loss_anco")


def _floats(rows, key):
    xs, ys = [], []
    for i, r in enumerate(rows):
        v = r.get(key, "")
        if v in ("", None):
            continue
        v = float(v)
        if math.isfinite(v):
            xs.append(i)
            ys.append(v)
    return xs, ys


def plot_runlog(records: list[dict], path) -> list[str]:
    """Write loss curves (and validation Dice if logged) as SVG.

    Steps from consecutive stages are laid end to end on one axis.
    Returns the names of the series that were drawn.
    """
    steps = [r for r in records if r.get("record") == "step"]
    vals = [r for r in records if r.get("record") == "val"]
    has_val = any(r.get("val_dice") not in ("", None) for r in vals)
    fig, axes = plt.subplots(2 if has_val else 1, 1, figsize=(7, 6 if has_val else 3.5),
                             squeeze=False)
    ax = axes[0, 0]
    drawn = []
    for key in LOSS_COLUMNS:
        xs, ys = _floats(steps, key)
        if ys:
            ax.plot(xs, ys, lw=0.8, label=key)
            drawn.append(key)
    bounds, prev = [], None
    for i, r in enumerate(steps):
        if r.get("stage") != prev:
            bounds.append((i, r.get("stage")))
            prev = r.get("stage")
    for i, name in bounds[1:]:
        ax.axvline(i, color="grey", ls=":", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if drawn:
        ax.legend(fontsize=7)
    if has_val:
        xs, ys = _floats(vals, "val_dice")
        axes[1, 0].plot(xs, ys, marker="o")
        axes[1, 0].set_xlabel("validation round")
        axes[1, 0].set_ylabel("macro Dice")
        drawn.append("val_dice")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return drawn


def plot_report(report, path) -> None:
    """Bar chart of per-class mean Dice and ASD."""
    cd, ca = report.class_dice(), report.class_asd()
    labels = [str(c) for c in report.classes]
    fig, (a, b) = plt.subplots(1, 2, figsize=(7, 3))
    a.bar(labels, [cd[c] for c in report.classes])
    a.set_ylim(0, 1)
    a.set_title(f"Dice (macro {report.macro_dice:.3f})")
    a.set_xlabel("class")
    b.bar(labels, [0.0 if math.isnan(ca[c]) else ca[c] for c in report.classes])
    b.set_title("ASD (pixels)")
    b.set_xlabel("class")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
