"""Figures for policy exports and training logs.

Everything renders with the Agg backend straight to PNG files so the CLI
can drop images next to the CSV/JSON it writes.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_COLORS = {"BG": "#4c72b0", "FG": "#dd8452"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_tra_policy(policy_json: dict, path: str | Path) -> Path:
    """One panel per slot with FG and BG bin probabilities side by side."""
    bg, fg = policy_json["classes"]["BG"], policy_json["classes"]["FG"]
    n = len(bg)
    cols = min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        if k >= n:
            ax.axis("off")
            continue
        labels = [b["bin"] for b in bg[k]["bins"]]
        x = np.arange(len(labels))
        ax.bar(x - 0.2, [b["prob"] for b in bg[k]["bins"]], 0.4, color=CLASS_COLORS["BG"], label="BG")
        ax.bar(x + 0.2, [b["prob"] for b in fg[k]["bins"]], 0.4, color=CLASS_COLORS["FG"], label="FG")
        ax.set_title(bg[k]["name"], fontsize=9)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=70, fontsize=6)
        ax.set_ylim(0, 1)
        ax.tick_params(axis="y", labelsize=7)
        if k == 0:
            ax.legend(fontsize=7, frameon=False)
    fig.suptitle(f"TRA policy, iteration {policy_json.get('iteration', 0)}", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_tea_policy(policy_json: dict, path: str | Path, top: int = 12) -> Path:
    """Horizontal bars for the most probable TEA ops."""
    ops = sorted(policy_json["ops"], key=lambda o: (-o["prob"], o["op_id"]))[:top]
    fig, ax = plt.subplots(figsize=(5, 0.3 * len(ops) + 1))
    y = np.arange(len(ops))[::-1]
    ax.barh(y, [o["prob"] for o in ops], color="#55a868")
    ax.set_yticks(y)
    ax.set_yticklabels([o["name"] for o in ops], fontsize=7)
    ax.set_xlabel("probability")
    ax.set_title(f"TEA policy, iteration {policy_json.get('iteration', 0)}", fontsize=10)
    return _save(fig, path)


def plot_training_curves(history: Sequence[dict], path: str | Path) -> Path:
    it = [r["iteration"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3))
    for key, color in (("train_loss", "#4c72b0"), ("val_loss", "#c44e52")):
        vals = [r.get(key) for r in history]
        if any(v is not None for v in vals):
            ax.plot(it, [np.nan if v is None else v for v in vals], lw=0.8, color=color, label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_op_trajectories(snapshots: Sequence[dict], path: str | Path, ops: Sequence[str] | None = None) -> Path:
    """Probability over training of TRA bins (``op`` labels) for both classes.

    ``ops`` selects bins by op kind; by default every bin of the last slot is
    drawn, which is where injected destructive ops live.
    """
    if not snapshots:
        raise ValueError("no snapshots to plot")
    it = [s["iteration"] for s in snapshots]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    for ax, cls in zip(axes, ("BG", "FG")):
        last = snapshots[-1]["classes"][cls]
        picks = []
        for s, slot in enumerate(last):
            for j, b in enumerate(slot["bins"]):
                if (ops is None and s == len(last) - 1) or (ops is not None and b["op"] in ops):
                    picks.append((s, j, f"{slot['name']}:{b['bin']}"))
        for s, j, label in picks:
            ax.plot(it, [snap["classes"][cls][s]["bins"][j]["prob"] for snap in snapshots], lw=1, label=label)
        ax.set_title(cls, fontsize=9)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=6, frameon=False)
    axes[0].set_ylabel("probability")
    fig.tight_layout()
    return _save(fig, path)
