#!/usr/bin/env python3
"""
Report Plots
Bar charts of per-class metrics and confusion heatmaps for MetricsReports
"""

import logging
import os
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core_model import output_path  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

logger = logging.getLogger(__name__)


def _series(report: MetricsReport) -> Dict[str, Dict[str, float]]:
    if report.kind == "segmentation":
        return {"IoU": report.per_class_iou, "Pixel accuracy": report.per_class_pixel_accuracy}
    return {"Accuracy": {k: v for k, v in report.per_class_accuracy.items() if v is not None},
            "F1": {k: v for k, v in report.per_class_f1.items() if v is not None}}


def plot_report(report: MetricsReport, path: str, title: str = "") -> str:
    """Per-class bars over the included classes next to the confusion heatmap."""
    classes: List[str] = list(report.included_classes) or list(report.class_names)
    series = _series(report)

    fig, (bars, heat) = plt.subplots(1, 2, figsize=(13, 5))
    positions = np.arange(len(classes))
    width = 0.8 / max(1, len(series))
    for k, (label, values) in enumerate(series.items()):
        bars.bar(positions + k * width, [100.0 * values.get(c, 0.0) for c in classes], width, label=label)
    bars.set_xticks(positions + width * (len(series) - 1) / 2.0)
    bars.set_xticklabels(classes, rotation=30, ha="right")
    bars.set_ylim(0, 100)
    bars.set_ylabel("%")
    bars.set_title(title or report.table)
    bars.grid(True, axis="y")
    bars.legend()

    confusion = np.asarray(report.confusion, dtype=np.float64)
    totals = confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(confusion, totals, out=np.zeros_like(confusion), where=totals > 0)
    image = heat.imshow(normalized, vmin=0.0, vmax=1.0, cmap="viridis")
    heat.set_xticks(range(len(report.class_names)))
    heat.set_yticks(range(len(report.class_names)))
    heat.set_xticklabels(report.class_names, rotation=30, ha="right")
    heat.set_yticklabels(report.class_names)
    heat.set_xlabel("Predicted")
    heat.set_ylabel("Ground truth")
    heat.set_title("Confusion (row-normalized)")
    fig.colorbar(image, ax=heat)

    fig.tight_layout()
    try:
        with output_path(path):
            fig.savefig(path)
    finally:
        plt.close(fig)
    logger.info("Plot saved to %s", path)
    return path


class ReportPlotter:
    """Writes one figure per evaluated stage into a report directory."""

    def __init__(self, report_dir: str):
        self.report_dir = report_dir

    def plot_all(self, reports: Dict[str, MetricsReport]) -> List[str]:
        return [plot_report(report, os.path.join(self.report_dir, f"{key}.png"), key)
                for key, report in reports.items()]
