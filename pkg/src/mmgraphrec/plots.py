"""Report figures rendered to files next to the delimited outputs.

Each helper takes already-computed numbers and a target path, draws one
matplotlib figure, and saves it; nothing here recomputes metrics.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_training_curves(history: list[dict], path) -> Path:
    """Loss components and validation recall against the epoch axis."""
    epochs = [h["epoch"] for h in history]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (("loss_total", "total"), ("loss_rec", "ranking"),
                       ("loss_modal", "modal"), ("loss_sce", "structural")):
        values = [h.get(key) for h in history]
        if any(v is not None for v in values):
            ax_loss.plot(epochs, values, label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    val = [(h["epoch"], h["val_recall@20"]) for h in history if "val_recall@20" in h]
    if val:
        ax_val.plot(*zip(*val), color="tab:green")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation Recall@20")
    return _finish(fig, path)


def save_metric_bars(recall: dict[int, float], ndcg: dict[int, float], path) -> Path:
    ks = sorted(recall)
    x = np.arange(len(ks))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.38
    ax.bar(x - width / 2, [recall[k] for k in ks], width, label="Recall")
    ax.bar(x + width / 2, [ndcg[k] for k in ks], width, label="NDCG")
    ax.set_xticks(x, [f"@{k}" for k in ks])
    ax.set_ylabel("metric")
    ax.legend()
    return _finish(fig, path)


def save_group_bars(per_group: dict[str, dict], k: int, path) -> Path:
    """Recall@k per sparsity bucket."""
    labels = list(per_group)
    values = [per_group[g]["recall"][str(k)] for g in labels]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(np.arange(len(labels)), values, color="tab:blue")
    ax.set_xticks(np.arange(len(labels)), labels, rotation=20, fontsize=8)
    ax.set_xlabel("training interactions per user")
    ax.set_ylabel(f"Recall@{k}")
    return _finish(fig, path)


def save_bias_comparison(stats: dict[str, dict[str, float]], path) -> Path:
    """Average neighbor popularity and tail ratio, base vs counterfactual."""
    names = list(stats)
    fig, (ax_pop, ax_tail) = plt.subplots(1, 2, figsize=(8, 3.5))
    x = np.arange(len(names))
    ax_pop.bar(x, [stats[n]["avg_pop"] for n in names], color="tab:orange")
    ax_pop.set_xticks(x, names)
    ax_pop.set_ylabel("avg neighbor popularity")
    ax_tail.bar(x, [stats[n]["tail_ratio"] for n in names], color="tab:purple")
    ax_tail.set_xticks(x, names)
    ax_tail.set_ylabel("long-tail neighbor ratio")
    ax_tail.set_ylim(0, 1)
    return _finish(fig, path)


def save_alignment_bars(scores: dict[str, float], path) -> Path:
    """Semantic alignment of identity variants against content anchors."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(np.arange(len(names)), [scores[n] for n in names], color="tab:cyan")
    ax.set_xticks(np.arange(len(names)), names, rotation=15, fontsize=8)
    ax.set_ylabel("mean cosine to content anchors")
    return _finish(fig, path)


def save_sweep_grid(rows: list[dict], metric: str, param_x: str,
                    param_y: str | None, path) -> Path:
    """Heatmap over two swept parameters, or a line over one."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    if param_y is None:
        xs = [r[param_x] for r in rows]
        ys = [r[metric] for r in rows]
        order = np.argsort(xs)
        ax.plot(np.asarray(xs)[order], np.asarray(ys)[order], marker="o")
        ax.set_xlabel(param_x)
        ax.set_ylabel(metric)
    else:
        xs = sorted({r[param_x] for r in rows})
        ys = sorted({r[param_y] for r in rows})
        grid = np.full((len(ys), len(xs)), np.nan)
        for r in rows:
            grid[ys.index(r[param_y]), xs.index(r[param_x])] = r[metric]
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(np.arange(len(xs)), [f"{v:g}" for v in xs])
        ax.set_yticks(np.arange(len(ys)), [f"{v:g}" for v in ys])
        ax.set_xlabel(param_x)
        ax.set_ylabel(param_y)
        fig.colorbar(im, ax=ax, label=metric)
    return _finish(fig, path)
