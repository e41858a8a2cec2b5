"""Figures written next to the CSV/JSONL outputs. Uses the Agg backend so
nothing needs a display."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(records: Sequence[dict], path: str | Path) -> Path:
    """Per-episode probe accuracy, greedy validation accuracy and retrain loss."""
    by_ep: dict[int, list[float]] = {}
    rewards: list[int] = []
    greedy, retrain = [], []
    for r in records:
        phase = r.get("phase")
        if phase == "search":
            by_ep.setdefault(r["episode"], []).append(r["val_acc"])
            rewards.append(r["reward"])
        elif phase == "episode_end":
            greedy.append((r["episode"], r["val_acc_greedy"]))
        elif phase == "retrain":
            retrain.append((r["epoch"], r["gnn_loss"]))

    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
        if by_ep:
            eps = sorted(by_ep)
            mean = [np.mean(by_ep[e]) for e in eps]
            sd = [np.std(by_ep[e]) for e in eps]
            ax1.errorbar(eps, mean, yerr=sd, marker="o", ms=3, capsize=2, label="probe accuracy")
        if greedy:
            e, a = zip(*greedy)
            ax1.plot(e, a, marker="s", ms=3, label="greedy val accuracy")
        if rewards:
            ax1b = ax1.twinx()
            ax1b.plot(np.linspace(0, max(by_ep) if by_ep else 1, len(rewards)),
                      np.cumsum(rewards), color="0.6", lw=0.8)
            ax1b.set_ylabel("cumulative reward", color="0.4")
            ax1b.grid(False)
        ax1.set_xlabel("episode")
        ax1.set_ylabel("accuracy")
        ax1.set_ylim(0, 1)
        if by_ep or greedy:
            ax1.legend(loc="lower right", fontsize=8)
        if retrain:
            e, lo = zip(*retrain)
            ax2.plot(e, lo, color="C3")
        ax2.set_xlabel("retrain epoch")
        ax2.set_ylabel("summed batch loss")
        return _save(fig, path)


def plot_probe(rows: Sequence[dict], path: str | Path) -> Path:
    """Heatmap of per-target correct-classification ratios by depth; the
    agent's choice is circled."""
    cols = sorted(k for k in rows[0] if k.startswith("ratio_l")) if rows else []
    M = np.array([[r[c] for c in cols] for r in rows]) if rows else np.zeros((0, 0))
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3 + 0.4 * len(cols), 1.2 + 0.28 * len(rows)))
        im = ax.imshow(M, aspect="auto", cmap="viridis", vmin=0, vmax=1)
        for i, r in enumerate(rows):
            ax.plot(r["agent_choice"] - 1, i, "o", mfc="none",
                    mec="w" if r["match"] else "r", ms=9, mew=1.5)
        ax.set_xticks(range(len(cols)), [c.replace("ratio_", "") for c in cols])
        ax.set_yticks(range(len(rows)), [str(r["target_id"]) for r in rows], fontsize=7)
        ax.set_xlabel("layers")
        ax.set_ylabel("target")
        fig.colorbar(im, ax=ax, label="share correct")
        return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Mean test accuracy per variant with one-std error bars."""
    by_var: dict[str, list[float]] = {}
    for r in rows:
        by_var.setdefault(r["variant"], []).append(float(r["test_accuracy"]))
    names = list(by_var)
    means = [np.mean(by_var[v]) for v in names]
    sds = [np.std(by_var[v]) for v in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(names), 3.2))
        ax.bar(names, means, yerr=sds, capsize=3, color=[f"C{i}" for i in range(len(names))])
        ax.set_ylim(0, 1)
        ax.set_ylabel("test accuracy")
        return _save(fig, path)
