"""Figures written next to CLI reports. Rendering is headless (Agg)."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_loss_traces(traces: Mapping[str, Sequence[float]], path, title: str = "training loss") -> Path:
    """One curve per named trace, log-scaled when every value is positive."""
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = True
    for name, trace in traces.items():
        if len(trace):
            ax.plot(range(len(trace)), trace, label=name, linewidth=1.2)
            positive = positive and min(trace) > 0
    if positive and any(len(t) for t in traces.values()):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if any(len(t) for t in traces.values()):
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(records: Sequence[Mapping], path) -> Path:
    """Side-by-side bars of grounding overlap and nDCG@10 per configuration."""
    names = [r["config"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8), sharey=False)
    for ax, key, label in zip(axes, ("overlap_at_10", "ndcg_at_10"), ("overlap@10 with teacher", "nDCG@10")):
        vals = [r[key] for r in records]
        ax.bar(range(len(vals)), vals, color="#4c72b0")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0, 1)
        ax.set_title(label)
        for i, v in enumerate(vals):
            ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_prune_sweep(rows: Sequence[Mapping], path, metric: str = "ndcg@10") -> Path:
    """Effectiveness against mean index terms per document, one point per prune spec."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["mean_nnz"] for r in rows]
    ys = [r[metric] for r in rows]
    ax.plot(xs, ys, marker="o", linestyle="-", linewidth=1)
    for r, x, y in zip(rows, xs, ys):
        ax.annotate(r["spec"], (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel("mean terms per document")
    ax.set_ylabel(metric)
    ax.set_title("pruning trade-off")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_per_query(metrics: Mapping[str, Mapping[str, float]], path) -> Path:
    """Histogram of per-query values for each metric, mean marked."""
    fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(4 * max(len(metrics), 1), 3.5), squeeze=False)
    for ax, (name, values) in zip(axes[0], metrics.items()):
        per_q = [v for q, v in values.items() if q != "all"]
        ax.hist(per_q, bins=20, range=(0, 1), color="#4c72b0")
        if "all" in values:
            ax.axvline(values["all"], color="#c44e52", linestyle="--", label=f"mean {values['all']:.3f}")
            ax.legend(fontsize=8)
        ax.set_xlabel(name)
        ax.set_ylabel("queries")
    fig.tight_layout()
    return _save(fig, path)
