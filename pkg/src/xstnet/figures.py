"""Matplotlib renderings of the delimited outputs.

Every report command writes its CSV first; these helpers draw the same
numbers as PNG files next to it.  Figures are additive: nothing reads them
back, and the CSVs stay the source of truth.  The Agg backend keeps this
usable on headless machines, and PNG metadata is pinned so reruns produce
stable bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


@dataclass
class CurvePoint:
    step: int
    value: float


def _finish(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_training_curves(
    loss_points: list[CurvePoint],
    dev_points: dict[str, list[CurvePoint]],
    path: str | os.PathLike,
    title: str = "training",
) -> None:
    """Loss per step plus one dev-metric line per metric name."""
    fig, (ax_loss, ax_dev) = plt.subplots(1, 2, figsize=(9, 3.5))
    if loss_points:
        ax_loss.plot([p.step for p in loss_points], [p.value for p in loss_points], lw=0.8, color="#444444")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_title(title)
    for name, pts in sorted(dev_points.items()):
        ax_dev.plot([p.step for p in pts], [p.value for p in pts], marker="o", ms=3, label=name)
    ax_dev.set_xlabel("step")
    ax_dev.set_ylabel("dev metric")
    if dev_points:
        ax_dev.legend(fontsize=8)
    _finish(fig, path)


def plot_recipe_bars(rows: list[tuple[str, float]], metric: str, path: str | os.PathLike) -> None:
    """One bar per recipe, e.g. mean test ST BLEU from an ablation table."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r[0] for r in rows]
    values = [r[1] for r in rows]
    ax.bar(range(len(rows)), values, color="#5b8db8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=7)
    _finish(fig, path)


def plot_ext_sweep(rows: list[tuple[int, float, float]], path: str | os.PathLike) -> None:
    """MT and ST BLEU against the external pair count, two lines one axis."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    sizes = [r[0] for r in rows]
    ax.plot(sizes, [r[1] for r in rows], marker="s", color="#3465a4", label="mt_bleu")
    ax.plot(sizes, [r[2] for r in rows], marker="o", color="#a40000", label="st_bleu")
    ax.set_xlabel("external MT pairs")
    ax.set_ylabel("BLEU")
    ax.set_xscale("log")
    ax.legend(fontsize=8)
    _finish(fig, path)


def plot_convergence(curves: dict[str, list[CurvePoint]], path: str | os.PathLike) -> None:
    """Dev BLEU against fine-tune step for competing recipes."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, pts in sorted(curves.items()):
        ax.plot([p.step for p in pts], [p.value for p in pts], marker="o", ms=3, label=name)
    ax.set_xlabel("fine-tune step")
    ax.set_ylabel("dev BLEU")
    ax.legend(fontsize=8)
    _finish(fig, path)
