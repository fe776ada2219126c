"""Sweep and search charts written as SVG (and optionally PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "setfusion",  # stable element ids, so reruns give identical files
    "svg.fonttype": "none",
}


def _save(fig, path, png: bool) -> list[Path]:
    path = Path(path)
    written = [path.with_suffix(".svg")]
    fig.savefig(written[0], format="svg", metadata={"Date": None, "Creator": None})
    if png:
        written.append(path.with_suffix(".png"))
        fig.savefig(written[1], format="png", dpi=150, metadata={"Software": None})
    plt.close(fig)
    return written


def plot_sweep(reports: dict, path, metric: str = "auprc", png: bool = False) -> list[Path]:
    """Metric vs percentage of all cases with the modality masked, one line per label.

    ``reports`` maps a legend label (e.g. the head variant) to a sweep report.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for label, rep in reports.items():
            x = [float(v) for v in rep.column("case_pct")]
            ax.plot(x, rep.means(metric), marker="o", ms=3, lw=1.2, label=label)
        modality = next(iter(reports.values())).rows[0].condition["modality"] if reports else ""
        ax.set_xlabel(f"cases with {modality} masked (%)")
        ax.set_ylabel(metric.upper())
        if len(reports) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, png)


def plot_fls(report: MetricReport, path, png: bool = False) -> list[Path]:
    """Validation AUPRC/AUROC per fusion start layer."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        x = [int(v) for v in report.column("fusion_layer")]
        for metric in ("auprc", "auroc"):
            ax.plot(x, report.means(metric), marker="o", ms=3, lw=1.2, label=metric.upper())
        ax.set_xticks(x)
        ax.set_xlabel("fusion start layer")
        ax.set_ylabel("validation score")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, png)
