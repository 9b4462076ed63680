"""File-based figure rendering for the report objects.

Everything draws through the Agg backend and writes straight to disk;
nothing here opens a window. The numeric emitters (JSON/CSV) live with
their modules, this is presentation only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import CollapseReport, MetricsReport, Task
from .trainer import TrainReport

_DPI = 130


def collapse_figure(report: CollapseReport, path: str | Path) -> Path:
    """Bar chart of mean pairwise text cosine by event count."""
    items = sorted(report.by_event_count.items())
    counts = [str(n) for n, _ in items]
    means = [m for _, (m, _) in items]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar(counts, means, color="#4878a8")
    ax.axhline(report.mean, color="#a84444", linestyle="--", linewidth=1.0,
               label=f"corpus mean {report.mean:.3f}")
    ax.set_xlabel("events per video")
    ax.set_ylabel("mean pairwise text cosine")
    ax.set_title("Text similarity by event count")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def recall_figure(report: MetricsReport, path: str | Path) -> Path:
    """Recall against k; three curves for video-to-text, one otherwise."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ks = list(report.ks)
    if report.task is Task.VIDEO_TO_TEXT:
        ax.plot(ks, report.recall_one_hit, "o-", label="One-Hit")
        ax.plot(ks, report.recall_average, "s-", label="Average")
        ax.plot(ks, report.recall_all_hit, "^-", label="All-Hit")
    else:
        ax.plot(ks, report.recall_average, "o-", label="Recall")
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("k")
    ax.set_ylabel("recall")
    ax.set_title(f"Recall@k ({report.task.value}, {report.n_queries} queries)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out


def training_figure(report: TrainReport, path: str | Path) -> Path:
    """Per-epoch loss curves with the collapse mean on a second axis."""
    epochs = list(range(1, report.epochs + 1))
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(epochs, report.mean_total, "o-", color="#303030", label="total")
    ax.plot(epochs, report.mean_v2t, "s--", color="#4878a8", label="v2t")
    ax.plot(epochs, report.mean_t2v, "^--", color="#a85848", label="t2v")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_xticks(epochs)
    ax2 = ax.twinx()
    ax2.plot(epochs, report.collapse_mean, "d:", color="#508050", label="collapse")
    ax2.set_ylabel("mean text cosine")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    ax.set_title("Training curves")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out
