"""Figures rendered next to the CSV reports of ``salatdet eval``."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

# no timestamps in PNG metadata, so figures are reproducible
_PNG_META = {"Software": None}


def new(width=5.0, height=3.2, nrows=1, ncols=1):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height))
    return fig, ax


def save(fig, path):
    path = Path(path)
    with plt.rc_context(RC):
        fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def _short(name):
    return name.split("(")[-1].rstrip(")") if "(" in name else name


def plot_ap_per_class(report, out_dir, iou=0.5):
    with plt.rc_context(RC):
        fig, ax = new()
        names = [_short(n) for n in report.class_names]
        aps = [report.ap[iou][c] for c in range(len(names))]
        x = np.arange(len(names))
        ax.bar(x, [a if a is not None else 0.0 for a in aps], color="C0")
        for xi, a in zip(x, aps):
            label = "n/a" if a is None else f"{a:.2f}"
            ax.text(xi, (a or 0.0) + 0.02, label, ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1.1)
        ax.set_ylabel(f"AP @ IoU {iou:g}")
        ax.set_title("Average precision per class")
    return save(fig, Path(out_dir) / "ap_per_class.png")


def plot_map_vs_iou(report, out_dir):
    with plt.rc_context(RC):
        fig, ax = new()
        ts = list(report.iou_thresholds)
        maps = [report.map[t] if report.map[t] is not None else np.nan for t in ts]
        ax.plot(ts, maps, marker="o")
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("mAP")
        ax.set_ylim(0, 1.05)
        title = "mAP across IoU thresholds"
        if report.latency is not None:
            title += f" ({report.latency.mean_ms:.1f} ms/image)"
        ax.set_title(title)
    return save(fig, Path(out_dir) / "map_vs_iou.png")


def plot_average_iou(report, out_dir):
    with plt.rc_context(RC):
        fig, ax = new(width=4.0)
        ts = list(report.iou_thresholds)
        vals = [report.average_iou[t] if report.average_iou[t] is not None else 0.0 for t in ts]
        ax.bar([f"{t:g}" for t in ts], vals, color="C2")
        ax.set_xlabel("IoU threshold of matching")
        ax.set_ylabel("average IoU of TP")
        ax.set_ylim(0, 1.05)
    return save(fig, Path(out_dir) / "average_iou.png")


def plot_tp_fp_fn(report, out_dir, mode, iou=0.5):
    with plt.rc_context(RC):
        fig, ax = new()
        names = [_short(n) for n in report.class_names]
        counts = np.array([report.counts[mode][iou][c] for c in range(len(names))]).reshape(-1, 3)
        x = np.arange(len(names))
        width = 0.27
        for k, label in enumerate(("TP", "FP", "FN")):
            ax.bar(x + (k - 1) * width, counts[:, k], width, label=label)
        ax.set_xticks(x, names)
        ax.set_ylabel("count")
        ax.set_title(f"TP / FP / FN at IoU {iou:g} ({mode})")
        ax.legend(frameon=False)
    return save(fig, Path(out_dir) / "tp_fp_fn.png")


def plot_pr_curves(report, out_dir, iou=0.5):
    with plt.rc_context(RC):
        fig, ax = new()
        for c, name in enumerate(report.class_names):
            pts = report.pr_curves[iou][c]
            if not pts:
                continue
            ax.step([0.0] + [p.recall for p in pts], [1.0] + [p.precision for p in pts],
                    where="post", label=_short(name))
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"Precision-recall at IoU {iou:g}")
        ax.legend(frameon=False)
    return save(fig, Path(out_dir) / "pr_curves.png")


def render_report(report, out_dir, mode):
    """Write every report figure into ``out_dir``; returns the paths."""
    iou = 0.5 if 0.5 in report.iou_thresholds else report.iou_thresholds[0]
    return [
        plot_ap_per_class(report, out_dir, iou),
        plot_map_vs_iou(report, out_dir),
        plot_average_iou(report, out_dir),
        plot_tp_fp_fn(report, out_dir, mode, iou),
        plot_pr_curves(report, out_dir, iou),
    ]
