"""Report figures written straight to files (Agg canvas, no pyplot state)."""

from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
TRAIN_COLOR = "#1f4e79"
TEST_COLOR = "#c0504d"


def _new(width=5.0, height=3.2):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    for key, val in STYLE.items():
        _, _, side = key.rpartition(".")
        if key.startswith("axes.spines"):
            ax.spines[side].set_visible(val)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no Software/date chunks, so identical inputs give identical files
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def plot_loss_curves(history, path, title="training loss") -> Path:
    """Train and test loss per epoch from a list of ``EpochRecord``."""
    fig, ax = _new()
    epochs = [r.epoch for r in history]
    ax.plot(epochs, [r.train_loss for r in history], color=TRAIN_COLOR, lw=1.4, label="train")
    test = [(r.epoch, r.test_loss) for r in history if r.test_loss is not None]
    if test:
        ax.plot(*zip(*test), color=TEST_COLOR, lw=1.4, ls="--", label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=STYLE["font.size"] + 1)
    if len(epochs) > 1 and min(r.train_loss for r in history) > 0:
        ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_metrics(report, path) -> Path:
    """Bar chart of a ``MetricsReport``; undefined metrics are marked n/a."""
    names = list(report.metrics)
    values = [report.metrics[k] for k in names]
    fig, ax = _new(width=max(4.0, 0.7 * len(names) + 1.5))
    xs = range(len(names))
    ax.bar(xs, [v or 0.0 for v in values], color=TRAIN_COLOR, width=0.6)
    for x, v in zip(xs, values):
        label = "n/a" if v is None else f"{v:.1f}"
        ax.text(x, (v or 0.0) + 1.0, label, ha="center", va="bottom", fontsize=7)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=40, ha="right", fontsize=7)
    ax.set_ylim(0, 110)
    ax.set_ylabel("%")
    ax.set_title(f"{report.task} metrics ({report.n_images} images)", fontsize=STYLE["font.size"] + 1)
    return _save(fig, path)


def plot_parameter_counts(rows, path, reference=None) -> Path:
    """Horizontal bars of ``(label, n_params)`` with an optional reference line."""
    labels = [r[0] for r in rows]
    counts = [r[1] / 1e6 for r in rows]
    fig, ax = _new(width=5.5, height=0.35 * len(rows) + 1.2)
    ys = range(len(rows))
    ax.barh(ys, counts, color=TRAIN_COLOR, height=0.6)
    ax.set_yticks(list(ys))
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    if reference is not None:
        ax.axvline(reference / 1e6, color=TEST_COLOR, ls="--", lw=1.0)
        ax.axvspan(0.7 * reference / 1e6, 1.3 * reference / 1e6, color=TEST_COLOR, alpha=0.08)
    ax.set_xlabel("parameters (millions)")
    return _save(fig, path)
